"""Checkpoint container for trained forecasting models.

Layout (little-endian):
    b"TABN" | u16 version | u32 n + config JSON | u32 n + manifest JSON
    | u64 n + tensor payload | sha256 of everything before it (32 bytes)
"""
import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from engine.serialize import pack_tensors, unpack_tensors
from errors import CorruptPayload, VersionMismatch
from storage import PathLike, atomic_write_bytes
from tabnet import FeatureScaler, TabNetConfig, TabNetModel

logger = logging.getLogger(__name__)

MAGIC = b"TABN"
FORMAT_VERSION = 1
DIGEST_SIZE = 32
SCALER_MEAN = "scaler.mean"
SCALER_SCALE = "scaler.scale"


def encode_checkpoint(config: Mapping[str, Any], tensors: Mapping[str, np.ndarray],
                      version: int = FORMAT_VERSION) -> bytes:
    manifest, payload = pack_tensors(tensors)
    config_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    manifest_bytes = json.dumps([entry.model_dump() for entry in manifest], sort_keys=True).encode("utf-8")
    body = b"".join([
        MAGIC,
        struct.pack("<H", version),
        struct.pack("<I", len(config_bytes)), config_bytes,
        struct.pack("<I", len(manifest_bytes)), manifest_bytes,
        struct.pack("<Q", len(payload)), payload,
    ])
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(blob: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    if len(blob) < len(MAGIC) + 2 or blob[: len(MAGIC)] != MAGIC:
        raise CorruptPayload("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    if len(blob) < 6 + DIGEST_SIZE:
        raise CorruptPayload("checkpoint truncated")
    body, digest = blob[:-DIGEST_SIZE], blob[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptPayload("checkpoint checksum mismatch (file truncated or modified)")

    try:
        offset = 6
        (n,) = struct.unpack_from("<I", body, offset)
        config = json.loads(body[offset + 4 : offset + 4 + n])
        offset += 4 + n
        (n,) = struct.unpack_from("<I", body, offset)
        manifest = json.loads(body[offset + 4 : offset + 4 + n])
        offset += 4 + n
        (n,) = struct.unpack_from("<Q", body, offset)
        payload = body[offset + 8 : offset + 8 + n]
    except (struct.error, ValueError) as e:
        raise CorruptPayload(f"checkpoint sections unreadable: {e}") from e
    if len(payload) != n or offset + 8 + n != len(body):
        raise CorruptPayload("checkpoint payload length does not match its header")
    return config, unpack_tensors(manifest, payload)


def save_checkpoint(model: TabNetModel, path: PathLike, meta: Optional[Mapping[str, Any]] = None) -> Path:
    tensors = model.state_dict()
    tensors[SCALER_MEAN] = np.asarray(model.scaler.mean, dtype=np.float64)
    tensors[SCALER_SCALE] = np.asarray(model.scaler.scale, dtype=np.float64)
    config = {"model": model.config.model_dump(mode="json"), "meta": dict(meta or {})}
    path = atomic_write_bytes(path, encode_checkpoint(config, tensors))
    logger.info(f"Checkpoint written to {path} ({len(tensors)} tensors)")
    return path


def load_checkpoint_with_meta(path: PathLike) -> Tuple[TabNetModel, Dict[str, Any]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CorruptPayload(f"cannot read checkpoint {path}: {e}") from e
    config, tensors = decode_checkpoint(blob)
    try:
        model_config = TabNetConfig.model_validate(config["model"])
    except (KeyError, TypeError, ValidationError) as e:
        raise CorruptPayload(f"checkpoint config unreadable: {e}") from e

    scaler = None
    if SCALER_MEAN in tensors and SCALER_SCALE in tensors:
        scaler = FeatureScaler(mean=tensors.pop(SCALER_MEAN), scale=tensors.pop(SCALER_SCALE))
    dtypes = {t.dtype for t in tensors.values()}
    dtype = dtypes.pop() if len(dtypes) == 1 else np.float32
    model = TabNetModel(model_config, parameters=tensors, dtype=dtype, scaler=scaler)
    return model, dict(config.get("meta") or {})


def load_checkpoint(path: PathLike) -> TabNetModel:
    return load_checkpoint_with_meta(path)[0]
