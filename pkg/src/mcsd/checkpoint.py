"""Binary checkpoint container. See docs/checkpoint_format.md for the layout."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .kvtext import dump_kv, parse_kv
from .model import ModelConfig, ModelParams

MAGIC = b"MCSD"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


def save_checkpoint(path: str | Path, params: ModelParams, cfg: ModelConfig, extra: dict | None = None) -> None:
    """Write config (plus ``extra`` metadata keys) and every named tensor."""
    meta = cfg.to_dict()
    meta["tokenizer"] = "bytes"
    if extra:
        meta.update(extra)
    text = dump_kv(meta).encode("utf-8")
    named = params.named_tensors()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(text)))
        f.write(text)
        f.write(struct.pack("<I", len(named)))
        for name, t in named.items():
            arr = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<"))
            key = name.encode("utf-8")
            f.write(struct.pack("<H", len(key)))
            f.write(key)
            f.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Raw contents: metadata key-values and named arrays."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        if data[:4] != MAGIC:
            raise DataError(f"{path}: not an MCSD checkpoint")
        version, text_len = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        meta = parse_kv(data[off:off + text_len].decode("utf-8"))
        off += text_len
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + klen].decode("utf-8")
            off += klen
            code, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}Q", data, off)
            off += 8 * ndim
            dt = _DTYPES[code]
            n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            tensors[name] = np.frombuffer(data, dtype=dt, count=n // dt.itemsize, offset=off).reshape(shape).copy()
            off += n
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint ({exc})") from exc
    return meta, tensors


def load_checkpoint(path: str | Path, precision: int | None = None) -> tuple[ModelParams, ModelConfig, dict[str, str]]:
    """Load params and config; ``precision`` overrides the stored one (values are cast).

    Returns ``(params, cfg, extra)`` where ``extra`` holds non-config metadata.
    """
    meta, tensors = read_checkpoint(path)
    cfg_keys = set(ModelConfig.__dataclass_fields__)
    try:
        cfg = ModelConfig.from_dict({k: v for k, v in meta.items() if k in cfg_keys})
        if precision is not None:
            cfg = cfg.with_(precision=precision)
        params = ModelParams.from_named(cfg, tensors)
    except ConfigError as exc:
        raise DataError(f"{path}: checkpoint does not describe a valid model ({exc})") from exc
    extra = {k: v for k, v in meta.items() if k not in cfg_keys}
    return params, cfg, extra
