"""Named float64 array container and checkpoints built on it.

Layout (all integers little-endian)::

    b"F2DT" | version u16 | count u32
    per array: name_len u32 | name (UTF-8) | rank u32 | dims u32 * rank
               | payload: float64 little-endian, row-major
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

MAGIC = b"F2DT"
VERSION = 1
MAX_RANK = 16
MAX_ELEMENTS = 1 << 40

PathLike = Union[str, Path]


class TensorFileError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    if len(data) < 10 or bytes(view[:4]) != MAGIC:
        raise TensorFileError(f"bad magic {bytes(view[:4])!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise TensorFileError(f"unsupported tensor file version {version}")
    pos = 10
    out: dict[str, np.ndarray] = {}

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(data):
            raise TensorFileError(f"truncated file while reading {what}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    for index in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"name length of array #{index}"))
        name = bytes(take(name_len, f"name of array #{index}")).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of array {name!r}"))
        if rank > MAX_RANK:
            raise TensorFileError(f"array {name!r}: rank {rank} exceeds {MAX_RANK}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of array {name!r}"))
        n_elem = 1
        for d in dims:
            n_elem *= d
            if n_elem > MAX_ELEMENTS:
                raise TensorFileError(f"array {name!r}: dimension overflow {dims}")
        payload = take(8 * n_elem, f"payload of array {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(data):
        raise TensorFileError(f"{len(data) - pos} trailing bytes after {count} arrays")
    return out


def write(path: PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def read(path: PathLike) -> dict[str, np.ndarray]:
    try:
        return loads(Path(path).read_bytes())
    except TensorFileError as exc:
        raise TensorFileError(f"{path}: {exc}") from None


def encode_meta(meta: Mapping) -> np.ndarray:
    """JSON metadata stored as one float per UTF-8 byte."""
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float64)


def decode_meta(arr: np.ndarray) -> dict:
    return json.loads(np.asarray(arr, dtype=np.uint8).tobytes().decode("utf-8"))


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    opt: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"param.{k}": v for k, v in self.params.items()}
        arrays.update({f"ema.{k}": v for k, v in self.ema.items()})
        arrays.update({f"opt.{k}": v for k, v in self.opt.items()})
        arrays["meta"] = encode_meta(self.meta)
        return arrays

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> Checkpoint:
        params: dict[str, np.ndarray] = {}
        ema: dict[str, np.ndarray] = {}
        opt: dict[str, np.ndarray] = {}
        meta: Optional[dict] = None
        for key, arr in arrays.items():
            if key == "meta":
                meta = decode_meta(arr)
                continue
            prefix, _, name = key.partition(".")
            target = {"param": params, "ema": ema, "opt": opt}.get(prefix)
            if target is None or not name:
                raise TensorFileError(f"unexpected checkpoint entry {key!r}")
            target[name] = arr
        if not params:
            raise TensorFileError("checkpoint has no param.* arrays")
        if not ema:
            warnings.warn("checkpoint has no ema.* arrays; initializing EMA from raw params")
            ema = {k: v.copy() for k, v in params.items()}
        elif set(ema) != set(params):
            raise TensorFileError("ema.* and param.* arrays name different parameters")
        return cls(params, ema, opt, meta or {})


def save_checkpoint(path: PathLike, ckpt: Checkpoint) -> None:
    write(path, ckpt.to_arrays())


def load_checkpoint(path: PathLike) -> Checkpoint:
    return Checkpoint.from_arrays(read(path))
