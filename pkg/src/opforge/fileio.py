"""Binary tensor serialization and PNG export.

Checkpoint layout: magic ``OPFG``, format version u32, then one record per
parameter: name length (u32), UTF-8 name, rank (u32), extents (u64 each),
raw float64 payload. All integers and floats little-endian. A tensor file is
the same layout restricted to a single record with an empty name.
"""

import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import OpforgeError

__all__ = [
    "save_checkpoint", "load_checkpoint", "save_tensor", "load_tensor",
    "write_png", "write_png_grid",
]

_MAGIC = b"OPFG"
_VERSION = 1


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode_record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    parts = [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim)]
    for n in arr.shape:
        parts.append(struct.pack("<Q", n))
    parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, params: dict) -> None:
    """Write named arrays (or Tensors) to `path` atomically, in dict order."""
    chunks = [_MAGIC, struct.pack("<I", _VERSION)]
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value), dtype=np.float64)
        chunks.append(_encode_record(name, arr))
    _atomic_write(path, b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise OpforgeError(f"truncated tensor file: {self.path}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def done(self) -> bool:
        return self.pos == len(self.buf)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as {name: float64 array}, preserving file order."""
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    if r.take(4) != _MAGIC:
        raise OpforgeError(f"not a tensor file (bad magic): {path}")
    version = r.u32()
    if version != _VERSION:
        raise OpforgeError(f"unsupported tensor file version {version}: {path}")
    out: dict[str, np.ndarray] = {}
    while not r.done():
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u64() for _ in range(rank))
        count = 1
        for n in shape:
            count *= n
        data = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
        if name in out:
            raise OpforgeError(f"duplicate record {name!r} in {path}")
        out[name] = data.astype(np.float64)
    return out


def save_tensor(path, arr) -> None:
    save_checkpoint(path, {"": arr})


def load_tensor(path) -> np.ndarray:
    recs = load_checkpoint(path)
    if list(recs.keys()) != [""]:
        raise OpforgeError(f"expected a single unnamed record in {path}")
    return recs[""]


def _to_u8(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    lo = arr.min()
    span = arr.max() - lo
    if span <= 0:
        return np.zeros(arr.shape, dtype=np.uint8)
    return np.clip(np.rint((arr - lo) / span * 255.0), 0, 255).astype(np.uint8)


def write_png(path, arr) -> None:
    """Display-only export: grayscale, min/max normalized to 8 bits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_u8(arr), mode="L").save(path)


def write_png_grid(path, tiles: np.ndarray, cols: int = 8, gap: int = 1) -> None:
    """Tile a stack (N,H,W) into a grid image, each tile normalized on its own."""
    tiles = np.asarray(tiles, dtype=np.float64)
    if tiles.ndim != 3:
        raise OpforgeError(f"grid wants a (N,H,W) stack, got {tiles.shape}")
    n, h, w = tiles.shape
    rows = (n + cols - 1) // cols
    canvas = np.full(
        (rows * h + (rows - 1) * gap, cols * w + (cols - 1) * gap), 255, dtype=np.uint8
    )
    for i in range(n):
        rr, cc = divmod(i, cols)
        top, left = rr * (h + gap), cc * (w + gap)
        canvas[top : top + h, left : left + w] = _to_u8(tiles[i])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas, mode="L").save(path)
