"""On-disk formats: the DHT1 tensor container, PNG images, JSON sidecars.

Every writer goes through a temp file + ``os.replace`` so readers never see
a half-written output.
"""
from __future__ import annotations

import contextlib
import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image

MAGIC = b"DHT1"
MAX_ELEMENTS = 1 << 31


class ContainerError(ValueError):
    pass


@contextlib.contextmanager
def atomic_write(path, mode="wb"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContainerError(f"tensor name too long: {name[:32]}...")
        a = np.asarray(arr, dtype="<f4")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(a.tobytes(order="C"))
    return buf.getvalue()


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError("truncated tensor container")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ContainerError("bad magic: not a DHT1 tensor container")
    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        if rank > 32:
            raise ContainerError(f"tensor {name!r}: rank {rank} too large")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = 1
        for d in dims:
            n *= d
            if n > MAX_ELEMENTS:
                raise ContainerError(f"tensor {name!r}: dimension overflow")
        data = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        out[name] = data
    if pos != len(view):
        raise ContainerError("trailing bytes after last tensor")
    return out


def write_tensor_container(path, tensors: Mapping[str, np.ndarray]):
    blob = encode_tensors(tensors)
    with atomic_write(path) as fh:
        fh.write(blob)


def read_tensor_container(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def write_json(path, obj):
    with atomic_write(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(3,H,W) or (H,W) float image in [0,1] -> HWC / HW uint8."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3:
        a = a.transpose(1, 2, 0)
    return np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray):
    arr = to_uint8(img)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    with atomic_write(path) as fh:
        fh.write(buf.getvalue())


def read_png(path, mask: bool = False) -> np.ndarray:
    """PNG -> float32 (3,H,W) in [0,1], or a boolean (H,W) mask."""
    with Image.open(path) as im:
        if mask:
            return np.asarray(im.convert("L")) > 127
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def write_csv(path, header, rows):
    import csv

    with atomic_write(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(r)
