# Tasks package
from .synthetic import (
    Example, TaskSplit, generate, corpus_mixture, mixture_stream,
    dump_jsonl, load_jsonl, specials
)

__all__ = [
    'Example', 'TaskSplit', 'generate', 'corpus_mixture', 'mixture_stream',
    'dump_jsonl', 'load_jsonl', 'specials'
]
