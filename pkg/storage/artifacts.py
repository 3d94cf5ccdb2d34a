"""
Artifact Store
אחסון תוצרי ניסוי על הדיסק: מניפסטים, קבצי מדדים (JSON) וטבלאות (CSV)
"""
import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

from pydantic import BaseModel, ValidationError

from config import config
from core.errors import ConfigError, MissingArtifactError
from core.models import RunManifest

logger = logging.getLogger(__name__)

Payload = Union[BaseModel, Dict[str, Any], List[Any]]


def _to_jsonable(payload: Payload) -> Any:
    if isinstance(payload, BaseModel):
        return payload.model_dump(mode="json")
    if isinstance(payload, list):
        return [_to_jsonable(item) for item in payload]
    if isinstance(payload, dict):
        return {key: _to_jsonable(value) for key, value in payload.items()}
    return payload


class ArtifactStore:
    """
    תיקיית פלט אחת לכל הרצה.
    כל קובץ מדדים נכתב עם מפתחות ממוינים וללא חותמות זמן,
    כך שהרצה חוזרת מאותו מניפסט מפיקה אותם בתים בדיוק.
    """

    def __init__(self, root: Union[str, Path, None] = None):
        self.root = Path(root or config.OUTPUT_ROOT)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    # ========== JSON ==========

    def write_json(self, relpath: Union[str, Path], payload: Payload) -> Path:
        """שמירת JSON דטרמיניסטי"""
        path = self.root / relpath
        path.parent.mkdir(parents=True, exist_ok=True)
        text = json.dumps(_to_jsonable(payload), sort_keys=True, indent=2, ensure_ascii=False)
        path.write_text(text + "\n", encoding="utf-8")
        logger.debug(f"Wrote {path}")
        return path

    def read_json(self, relpath: Union[str, Path]) -> Any:
        path = self.root / relpath
        if not path.exists():
            raise MissingArtifactError(f"artifact not found: {path}")
        return json.loads(path.read_text(encoding="utf-8"))

    # ========== CSV ==========

    def write_csv(self, relpath: Union[str, Path], fieldnames: Sequence[str], rows: Sequence[Dict[str, Any]]) -> Path:
        """טבלת CSV לנתוני גרפים - עמודות בסדר קבוע"""
        path = self.root / relpath
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=list(fieldnames), extrasaction="ignore", lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({key: row.get(key, "") for key in fieldnames})
        logger.info(f"Wrote table {path} ({len(rows)} rows)")
        return path

    # ========== Manifests ==========

    def write_manifest(self, manifest: RunManifest) -> Path:
        return self.write_json(f"manifest_{manifest.command}.json", manifest)

    @staticmethod
    def load_manifest(path: Union[str, Path]) -> RunManifest:
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"manifest not found: {path}")
        try:
            return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
        except ValidationError as e:
            raise ConfigError(f"{path}: not a run manifest ({e.error_count()} errors)") from e

    # ========== Discovery ==========

    def find(self, pattern: str) -> List[Path]:
        """חיפוש תוצרים בתיקיית הפלט, בסדר קבוע"""
        return sorted(self.root.glob(pattern))

    def relative(self, path: Union[str, Path]) -> str:
        return Path(path).relative_to(self.root).as_posix()
