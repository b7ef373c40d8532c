import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

from fod_forge.errors import DataError

logger = logging.getLogger(__name__)

# Raw artifacts are always written little-endian.
_RAW_DTYPES = {
    "uint8": "<u1",
    "float32": "<f4",
    "float64": "<f8",
}


def object_dir_name(object_id: int) -> str:
    return f"obj{object_id:04d}"


def get_store_path(root: Path, *parts: str) -> Path:
    """Get artifact path under root, creating parent directories"""
    path = Path(root).joinpath(*parts)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def hash_json(data: Any) -> str:
    """SHA-256 of the canonical JSON encoding of data"""
    encoded = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(encoded.encode("utf-8")).hexdigest()


def hash_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def save_json_store(path: Path, data: Any) -> None:
    """Save JSON data with stable key order"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True, ensure_ascii=False)
    logger.debug("Saved %s", path)


def load_json_store(path: Path) -> Dict[str, Any]:
    """Load JSON data, empty dict when the file does not exist"""
    path = Path(path)
    if not path.exists():
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"corrupt JSON file {path}: {e}") from e


def sidecar_path(path: Path) -> Path:
    return Path(path).with_suffix(".json")


def save_raw(path: Path, array: np.ndarray, meta: Dict[str, Any]) -> str:
    """Write array as raw little-endian bytes plus a JSON sidecar.

    Returns the SHA-256 of the raw bytes, which is also stored in the sidecar.
    """
    path = Path(path)
    name = np.dtype(array.dtype).name
    if name == "bool":
        array = array.astype(np.uint8)
        name = "uint8"
    if name not in _RAW_DTYPES:
        raise DataError(f"unsupported raw dtype {name} for {path}")
    payload = np.ascontiguousarray(array, dtype=_RAW_DTYPES[name]).tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(payload)
    content_hash = hashlib.sha256(payload).hexdigest()
    sidecar = {
        **meta,
        "dtype": name,
        "shape": list(array.shape),
        "sha256": content_hash,
    }
    save_json_store(sidecar_path(path), sidecar)
    return content_hash


def load_raw(path: Path) -> Tuple[np.ndarray, Dict[str, Any]]:
    """Read a raw artifact written by save_raw"""
    path = Path(path)
    meta = load_json_store(sidecar_path(path))
    if not path.exists() or not meta:
        raise DataError(f"missing raw artifact or sidecar: {path}")
    dtype = _RAW_DTYPES.get(meta.get("dtype", ""))
    if dtype is None:
        raise DataError(f"unknown dtype in sidecar of {path}")
    shape = tuple(meta["shape"])
    array = np.fromfile(path, dtype=dtype)
    if array.size != int(np.prod(shape)):
        raise DataError(f"{path} holds {array.size} values, sidecar says {shape}")
    return array.reshape(shape).astype(np.dtype(meta["dtype"]), copy=False), meta


def raw_exists(path: Path) -> bool:
    path = Path(path)
    return path.exists() and sidecar_path(path).exists()


def directory_digests(root: Path) -> Dict[str, str]:
    """SHA-256 of every file below root, keyed by POSIX path relative to root"""
    root = Path(root)
    if not root.is_dir():
        return {}
    return {
        path.relative_to(root).as_posix(): hash_file(path)
        for path in sorted(root.rglob("*"))
        if path.is_file()
    }


def digests_match(root: Path, digests: Dict[str, str]) -> bool:
    """True when every recorded file still exists with its recorded content"""
    for relative, digest in digests.items():
        path = Path(root) / relative
        if not path.is_file() or hash_file(path) != digest:
            return False
    return True
