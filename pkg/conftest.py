# Root conftest: puts the repository root on sys.path so the flat packages import.
