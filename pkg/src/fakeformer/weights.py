"""FKF1 weight files.

Layout (little-endian): magic ``FKF1``, u32 version (1), u32 tensor count, then
per tensor: u32 name length, UTF-8 name, u32 ndim, u32 dims[ndim], float32
payload.  The model config is written next to the weights as JSON.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .model import ModelConfig, ModelParams, buffer_shapes, param_shapes
from .numerics.tensor import Tensor

MAGIC = b"FKF1"
VERSION = 1


class FormatError(ValueError):
    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})" if offset is not None else message)


def config_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".json")


def encode(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated file while reading {what}", pos)
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic, expected FKF1", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        start = pos
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not UTF-8", start) from exc
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        n = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(take(4 * n, f"payload of {name}"), dtype="<f4")
        out[name] = data.astype(np.float64).reshape(dims)
    if pos != len(blob):
        raise FormatError("trailing bytes after last tensor", pos)
    return out


def save_params(params: ModelParams, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(params.state()))
    config_path(path).write_text(json.dumps(params.config.to_dict(), indent=2, sort_keys=True) + "\n")


def load_params(path: Union[str, Path], config: Optional[ModelConfig] = None) -> ModelParams:
    path = Path(path)
    if config is None:
        cpath = config_path(path)
        if not cpath.exists():
            raise FormatError(f"no config next to weights: {cpath}")
        config = ModelConfig.from_dict(json.loads(cpath.read_text()))
    state = decode(path.read_bytes())
    pshapes, bshapes = param_shapes(config), buffer_shapes(config)
    expected = {**pshapes, **bshapes}
    missing = [n for n in expected if n not in state]
    extra = [n for n in state if n not in expected]
    if missing or extra:
        raise FormatError(f"tensor set mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, shape in expected.items():
        if state[name].shape != tuple(shape):
            raise FormatError(f"tensor {name!r} has shape {state[name].shape}, config expects {tuple(shape)}")
    tensors = {n: Tensor(state[n], name=n) for n in pshapes}
    buffers = {n: state[n].copy() for n in bshapes}
    return ModelParams(config, tensors, buffers)
