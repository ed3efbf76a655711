"""
serialization.py

On-disk formats shared by datasets, checkpoints and results:

- manifest pairs: `<stem>.json` (human-readable manifest) next to `<stem>.bin`
  (raw little-endian blobs at offsets declared in the manifest)
- JSON-lines result files, one record per line, keys sorted
"""
import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np

from exceptions import ConfigurationError

logger = logging.getLogger(__name__)

_DTYPES = {
    'f32le': np.dtype('<f4'),
    'i32le': np.dtype('<i4'),
}


def pair_paths(stem):
    stem = str(stem)
    for suffix in ('.json', '.bin'):
        if stem.endswith(suffix):
            stem = stem[:-len(suffix)]
    return Path(stem + '.json'), Path(stem + '.bin')


def encode(array, tag: str) -> bytes:
    """Row-major little-endian bytes of `array` in the dtype named by `tag`."""
    return np.ascontiguousarray(np.asarray(array), dtype=_DTYPES[tag]).tobytes(order='C')


def decode(buffer: bytes, tag: str, offset: int, shape) -> np.ndarray:
    dtype = _DTYPES[tag]
    count = int(np.prod(shape)) if len(shape) else 1
    end = offset + count * dtype.itemsize
    if end > len(buffer):
        raise ConfigurationError(f"Blob too short: need {end} bytes, have {len(buffer)}")
    return np.frombuffer(buffer, dtype=dtype, count=count, offset=offset).reshape(shape).copy()


def write_pair(stem, manifest: dict, payload: bytes):
    json_path, bin_path = pair_paths(stem)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    write_json(json_path, manifest)
    with open(bin_path, 'wb') as f:
        f.write(payload)
    logger.debug(f"Wrote {json_path.name} + {bin_path.name} ({len(payload)} bytes)")
    return json_path, bin_path


def read_pair(stem):
    json_path, bin_path = pair_paths(stem)
    for path in (json_path, bin_path):
        if not path.exists():
            raise ConfigurationError("Missing file", path=path)
    try:
        with open(json_path, 'r') as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError("Malformed manifest", path=json_path, original_error=e) from e
    with open(bin_path, 'rb') as f:
        payload = f.read()
    return manifest, payload


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write('\n')
    return path


def write_jsonl(path, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True))
            f.write('\n')
    return path


def read_jsonl(path) -> list:
    with open(path, 'r') as f:
        return [json.loads(line) for line in f if line.strip()]


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def pair_sha256(stem) -> str:
    """Hash of a manifest pair (manifest bytes followed by blob bytes)."""
    digest = hashlib.sha256()
    for path in pair_paths(stem):
        if not path.exists():
            raise ConfigurationError("Missing checkpoint file", path=path)
        digest.update(file_sha256(path).encode('ascii'))
    return digest.hexdigest()


def pair_exists(stem) -> bool:
    return all(os.path.exists(p) for p in pair_paths(stem))
