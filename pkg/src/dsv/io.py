"""Binary containers, PPM images and small text formats.

All three binary artifacts (checkpoints ``DSVC``, datasets ``DSVD`` and DSV
sets ``DSVX``) share one little-endian layout::

    magic      4 bytes
    version    u32 (= 1)
    header     u32 length + UTF-8 text
    count      u32
    records    count x (u32 name length, UTF-8 name, u32 ndim,
                        ndim x u32 extent, raw f64 data)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

VERSION = 1


class ContainerError(ValueError):
    pass


def encode_container(magic: bytes, header: str, arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    parts = [magic, struct.pack("<I", VERSION)]
    text = header.encode("utf-8")
    parts += [struct.pack("<I", len(text)), text, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}I", *arr.shape)]
        parts.append(arr.astype("<f8").tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ContainerError("truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def decode_container(buf: bytes, magic: bytes) -> tuple[str, dict[str, np.ndarray]]:
    r = _Reader(buf)
    if len(buf) < 4:
        raise ContainerError("truncated")
    if r.take(4) != magic:
        raise ContainerError("bad magic")
    version = r.u32()
    if version != VERSION:
        raise ContainerError(f"version mismatch: file has {version}, expected {VERSION}")
    header = r.text()
    arrays: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.text()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        arrays[name] = arr
    if r.pos != len(buf):
        raise ContainerError("trailing bytes after last record")
    return header, arrays


def write_container(path, magic: bytes, header: str, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_container(magic, header, arrays))


def read_container(path, magic: bytes) -> tuple[str, dict[str, np.ndarray]]:
    return decode_container(Path(path).read_bytes(), magic)


# ---------------------------------------------------------------- PPM

def write_ppm(path, rgb: np.ndarray, comment: str = "") -> None:
    """Binary P6 writer; ``rgb`` is (H, W, 3) uint8.  ``comment`` lines go in the header."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("write_ppm expects an (H, W, 3) uint8 array")
    h, w, _ = rgb.shape
    head = b"P6\n" + comment_block(comment).encode("utf-8") + b"%d %d\n255\n" % (w, h)
    Path(path).write_bytes(head + rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError("not an 8-bit P6 file")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(buf[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError("truncated PPM")
    return data.reshape(h, w, 3)


def to_rgb(img: np.ndarray) -> np.ndarray:
    """(C, H, W) float image in [0, 1] -> (H, W, 3) uint8."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)


def image_grid(x: np.ndarray, y: np.ndarray, num_classes: int, border: int = 1) -> np.ndarray:
    """Tile (n, C, H, W) images into one row per class, left-aligned."""
    x = np.asarray(x)
    y = np.asarray(y, dtype=int)
    _, _, h, w = x.shape
    cols = max(1, max((int((y == c).sum()) for c in range(num_classes)), default=1))
    grid = np.full((num_classes * (h + border) + border, cols * (w + border) + border, 3),
                   64, dtype=np.uint8)
    for c in range(num_classes):
        for j, i in enumerate(np.flatnonzero(y == c)):
            top, left = border + c * (h + border), border + j * (w + border)
            grid[top:top + h, left:left + w] = to_rgb(x[i])
    return grid


_PALETTE = np.array([[230, 25, 75], [60, 180, 75], [0, 130, 200], [245, 130, 48],
                     [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60],
                     [250, 190, 212], [0, 128, 128]], dtype=np.uint8)


def scatter_image(points: np.ndarray, y: np.ndarray, size: int = 128,
                  extent: float | None = None) -> np.ndarray:
    """Rasterise 2-D points as 3x3 coloured dots (class colour) on white."""
    points = np.asarray(points, dtype=np.float64)
    if extent is None:
        extent = float(np.abs(points).max()) * 1.1 if points.size else 1.0
        extent = extent or 1.0
    img = np.full((size, size, 3), 255, dtype=np.uint8)
    scale = (size - 1) / (2 * extent)
    for (px, py), label in zip(points, np.asarray(y, dtype=int)):
        col = int(round((px + extent) * scale))
        row = int(round((extent - py) * scale))
        img[max(row - 1, 0):row + 2, max(col - 1, 0):col + 2] = _PALETTE[label % len(_PALETTE)]
    return img


# ---------------------------------------------------------------- key = value text

def comment_block(text: str) -> str:
    """Prefix every line of ``text`` with ``# `` (used to echo configs into CSV/PPM)."""
    return "".join(f"# {line}\n" for line in text.splitlines())


def strip_comments(text: str) -> tuple[str, str]:
    """Split leading ``#`` lines off ``text``; returns (comment text, remainder)."""
    lines = text.splitlines(keepends=True)
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        i += 1
    comment = "".join(l[1:].removeprefix(" ") for l in lines[:i])
    return comment, "".join(lines[i:])


def format_kv(values: dict) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in values.items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(i) for i in v)
    return "" if v is None else str(v)


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        out[key] = value
    return out
