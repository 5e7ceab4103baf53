"""Binary checkpoint format for named tensors, with integrity checking.

Layout (all integers little-endian):

    magic "VTAR"
    payload:
        format version  u32
        tensor count    u32
        per tensor:
            name length u32, UTF-8 name bytes
            dtype code  u8 (0 = float32, 1 = float64)
            rank        u8
            dims        u64 * rank
            raw values, little-endian
    CRC32 of payload    u32

Loading verifies the CRC before parsing anything, so a truncated or mangled
file never yields a partial model. Round trips are bit-exact.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import replace

import numpy as np

from .errors import CheckpointVersionError, CorruptCheckpointError
from .model import MODEL_CONFIGS, ModelConfig, ModelWeights, build_weights, named_tensors

MAGIC = b"VTAR"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_MAX_RANK = 8

_META_NAME = "__config__"
_MERGER_CODES = {"atm": 0, "avgpool": 1}
_PE_CODES = {"fpe": 0, "ape": 1}


def save_tensors(path: str, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays in the checkpoint format."""
    payload = bytearray()
    payload += struct.pack("<I", FORMAT_VERSION)
    payload += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _DTYPE_CODES:
            arr = arr.astype("<f8")
            dtype = arr.dtype
        encoded = name.encode("utf-8")
        payload += struct.pack("<I", len(encoded))
        payload += encoded
        payload += struct.pack("<BB", _DTYPE_CODES[dtype], arr.ndim)
        payload += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        payload += arr.astype(dtype).tobytes()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


def load_tensors(path: str) -> dict[str, np.ndarray]:
    """Read named arrays; raises on corruption or unknown format version."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 4 + 4 + 4:
        raise CorruptCheckpointError("file too short")
    if blob[:4] != MAGIC:
        raise CorruptCheckpointError("bad magic")
    payload = blob[4:-4]
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != stored_crc:
        raise CorruptCheckpointError("CRC mismatch")

    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(payload):
            raise CorruptCheckpointError("payload ended unexpectedly")
        out = payload[off:off + n]
        off += n
        return out

    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported format version {version}")
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptCheckpointError("invalid tensor name") from e
        code, rank = struct.unpack("<BB", take(2))
        if code not in _CODE_DTYPES or rank > _MAX_RANK:
            raise CorruptCheckpointError("invalid tensor header")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dtype = _CODE_DTYPES[code]
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        arr = np.frombuffer(take(n_bytes), dtype=dtype).reshape(dims)
        tensors[name] = arr.copy()
    if off != len(payload):
        raise CorruptCheckpointError("trailing bytes after last tensor")
    return tensors


def _encode_config(cfg: ModelConfig) -> np.ndarray:
    return np.array([
        cfg.patch_size, cfg.dim, cfg.depth, cfg.heads,
        cfg.grid_h, cfg.grid_w, cfg.num_classes,
        _MERGER_CODES[cfg.merger], _PE_CODES[cfg.pe_mode],
    ], dtype="<f8")


def _decode_config(meta: np.ndarray) -> ModelConfig:
    vals = [int(v) for v in meta]
    mergers = {v: k for k, v in _MERGER_CODES.items()}
    pes = {v: k for k, v in _PE_CODES.items()}
    fields = dict(
        patch_size=vals[0], dim=vals[1], depth=vals[2], heads=vals[3],
        grid_h=vals[4], grid_w=vals[5], num_classes=vals[6],
        merger=mergers[vals[7]], pe_mode=pes[vals[8]],
    )
    # Recover a registry name when the geometry matches one; cosmetic only.
    for known in MODEL_CONFIGS.values():
        if all(getattr(known, k) == v for k, v in fields.items()
               if k not in ("merger", "pe_mode")):
            return replace(known, **fields)
    return ModelConfig(name="custom", **fields)


def save_checkpoint(w: ModelWeights, path: str) -> None:
    """Serialize model weights plus the config needed to rebuild them."""
    tensors: dict[str, np.ndarray] = {_META_NAME: _encode_config(w.config)}
    for name, t in named_tensors(w).items():
        tensors[name] = np.asarray(t.data)
    save_tensors(path, tensors)


def load_checkpoint(path: str) -> ModelWeights:
    """Rebuild model weights from a checkpoint; bit-exact round trip."""
    tensors = load_tensors(path)
    meta = tensors.pop(_META_NAME, None)
    if meta is None:
        raise CorruptCheckpointError("missing config record")
    cfg = _decode_config(meta)
    return build_weights(cfg, tensors)
