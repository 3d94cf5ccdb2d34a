"""
Named-tensor container
safetensors file; our header rides in `__metadata__` as one sorted JSON string.
Shared by base-model and PEFT checkpoints.
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np
from safetensors import SafetensorError, safe_open
from safetensors.numpy import save_file

from core.errors import CheckpointError, MissingArtifactError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 2
HEADER_KEY = "trans_peft"


def _little_endian(array: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<"))


def fingerprint_arrays(arrays: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, dtypes, shapes and weight bytes, in name order."""
    digest = hashlib.sha256()
    for name in sorted(arrays):
        array = _little_endian(arrays[name])
        digest.update(name.encode("utf-8"))
        digest.update(array.dtype.str.encode("ascii"))
        digest.update(repr(array.shape).encode("ascii"))
        digest.update(array.tobytes())
    return digest.hexdigest()


def write_container(path: Path, kind: str, header: Dict[str, Any], arrays: Mapping[str, np.ndarray]) -> str:
    """Write `arrays` under `header`; returns the fingerprint stored in the file."""
    fingerprint = fingerprint_arrays(arrays)
    full_header = {
        **header,
        "kind": kind,
        "format_version": FORMAT_VERSION,
        "fingerprint": fingerprint,
    }
    # one metadata key keeps the file bytes independent of map ordering
    metadata = {HEADER_KEY: json.dumps(full_header, sort_keys=True)}

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        save_file({name: _little_endian(array) for name, array in arrays.items()}, str(path), metadata=metadata)
    except (SafetensorError, ValueError) as e:
        raise CheckpointError(f"{path}: cannot write {kind} checkpoint ({e})") from e
    logger.debug(f"Wrote {kind} container {path} ({len(arrays)} tensors)")
    return fingerprint


def _read_header(path: Path, metadata: Optional[Dict[str, str]]) -> Dict[str, Any]:
    if not metadata or HEADER_KEY not in metadata:
        raise CheckpointError(f"{path}: no {HEADER_KEY} header in metadata")
    try:
        header = json.loads(metadata[HEADER_KEY])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from e
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: header is not an object")
    for key in ("kind", "format_version", "fingerprint"):
        if key not in header:
            raise CheckpointError(f"{path}: header is missing '{key}'")
    return header


def read_container(path: Path, kind: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    try:
        with safe_open(str(path), framework="numpy") as handle:
            header = _read_header(path, handle.metadata())
            arrays = {name: np.array(handle.get_tensor(name)) for name in handle.keys()}
    except (SafetensorError, OSError, ValueError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e

    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {header['format_version']} != {FORMAT_VERSION}")
    if header["kind"] != kind:
        raise CheckpointError(f"{path}: holds a {header['kind']} checkpoint, expected {kind}")
    if fingerprint_arrays(arrays) != header["fingerprint"]:
        raise CheckpointError(f"{path}: fingerprint mismatch, file is corrupt")
    return header, arrays
