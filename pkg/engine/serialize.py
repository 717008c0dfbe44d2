"""Flat little-endian packing of named tensors."""
from typing import Dict, List, Mapping, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from errors import CorruptPayload

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class TensorEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    shape: List[int]
    dtype: str
    offset: int
    nbytes: int


def pack_tensors(tensors: Mapping[str, np.ndarray]) -> Tuple[List[TensorEntry], bytes]:
    """Concatenate arrays in name order; the manifest records where each one lives."""
    manifest: List[TensorEntry] = []
    chunks: List[bytes] = []
    offset = 0
    for name in sorted(tensors):
        array = np.asarray(tensors[name])
        code = _DTYPES.get(array.dtype.name)
        if code is None:
            raise CorruptPayload(f"tensor {name} has unsupported dtype {array.dtype}")
        raw = np.ascontiguousarray(array, dtype=code).tobytes()
        manifest.append(TensorEntry(name=name, shape=list(array.shape), dtype=code, offset=offset, nbytes=len(raw)))
        chunks.append(raw)
        offset += len(raw)
    return manifest, b"".join(chunks)


def unpack_tensors(manifest, payload: bytes) -> Dict[str, np.ndarray]:
    try:
        entries = [e if isinstance(e, TensorEntry) else TensorEntry.model_validate(e) for e in manifest]
    except ValidationError as e:
        raise CorruptPayload(f"malformed tensor manifest: {e.errors()[0]['msg']}") from e

    tensors: Dict[str, np.ndarray] = {}
    for entry in entries:
        if entry.dtype not in _DTYPES.values():
            raise CorruptPayload(f"tensor {entry.name} has unsupported dtype {entry.dtype}")
        end = entry.offset + entry.nbytes
        if entry.offset < 0 or end > len(payload):
            raise CorruptPayload(f"tensor {entry.name} extends past the end of the payload")
        dtype = np.dtype(entry.dtype)
        expected = int(np.prod(entry.shape, dtype=np.int64)) * dtype.itemsize
        if expected != entry.nbytes:
            raise CorruptPayload(f"tensor {entry.name}: {entry.nbytes} bytes cannot hold shape {entry.shape}")
        array = np.frombuffer(payload, dtype=dtype, count=expected // dtype.itemsize, offset=entry.offset)
        tensors[entry.name] = array.reshape(entry.shape).astype(dtype.newbyteorder("="))
    return tensors
