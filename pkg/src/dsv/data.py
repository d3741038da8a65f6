"""Datasets: synthetic blobs and glyphs, IDX loading, and the augmentation family."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .io import ContainerError, read_container, write_container
from .tensor import Tensor

DATASET_MAGIC = b"DSVD"
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Labelled samples. ``x`` is (n, *feature_shape); images are (n, C, H, W) in [0, 1]."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if x.ndim < 2:
            raise DataError("x must be (n, *feature_shape)")
        if len(x) != len(y):
            raise DataError(f"{len(x)} samples but {len(y)} labels")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if x.ndim == 4 and x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise DataError("image data must lie in [0, 1]")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    @property
    def is_image(self) -> bool:
        return self.x.ndim == 4

    def subset(self, index) -> Dataset:
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.x[index], self.y[index], self.num_classes)

    def of_class(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.y == c)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.x.astype("<f8").tobytes())
        h.update(self.y.astype("<i8").tobytes())
        return h.hexdigest()


def gen_blobs2d(num_classes: int, n_per_class: int, separation: float, seed: int = 0) -> Dataset:
    """Unit-variance Gaussian clusters with centres on a circle of radius ``separation``."""
    if num_classes < 2:
        raise DataError("need at least two classes")
    if separation < 0:
        raise DataError("separation must be non-negative")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    centres = separation * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    x = np.concatenate([rng.normal(size=(n_per_class, 2)) + c for c in centres])
    y = np.repeat(np.arange(num_classes), n_per_class)
    return Dataset(x, y, num_classes)


# seven-segment strokes: a top, b upper right, c lower right, d bottom,
# e lower left, f upper left, g middle
_SEGMENTS = {
    0: "abcdef", 1: "bc", 2: "abged", 3: "abgcd", 4: "fgbc",
    5: "afgcd", 6: "afgedc", 7: "abc", 8: "abcdefg", 9: "abcdfg",
}


def glyph_template(digit: int, size: int) -> np.ndarray:
    """Noise-free (size, size) seven-segment rendering of ``digit``."""
    img = np.zeros((size, size))
    t = max(1, size // 8)
    top, bottom = size // 8, size - size // 8
    left, right = size // 4, size - size // 4
    mid = size // 2
    spans = {
        "a": (slice(top, top + t), slice(left, right)),
        "g": (slice(mid - t // 2, mid - t // 2 + t), slice(left, right)),
        "d": (slice(bottom - t, bottom), slice(left, right)),
        "f": (slice(top, mid), slice(left, left + t)),
        "e": (slice(mid, bottom), slice(left, left + t)),
        "b": (slice(top, mid), slice(right - t, right)),
        "c": (slice(mid, bottom), slice(right - t, right)),
    }
    for seg in _SEGMENTS[digit]:
        img[spans[seg]] = 1.0
    return img


def gen_glyphs(num_classes: int, n_per_class: int, size: int = 16, noise=0.1,
               seed: int = 0) -> Dataset:
    """Digit-like glyphs: fixed per-class template plus clipped Gaussian pixel noise.

    ``noise`` is one standard deviation for every class or a sequence with one
    value per class.
    """
    if size not in (8, 16, 32):
        raise DataError("glyph size must be 8, 16 or 32")
    if not 2 <= num_classes <= 10:
        raise DataError("glyphs support 2..10 classes")
    sigma = np.broadcast_to(np.asarray(noise, dtype=np.float64), (num_classes,)) \
        if np.ndim(noise) == 0 else np.asarray(noise, dtype=np.float64)
    if sigma.shape != (num_classes,) or (sigma < 0).any():
        raise DataError("noise must be a non-negative scalar or one value per class")
    rng = np.random.default_rng(seed)
    templates = np.stack([glyph_template(c, size) for c in range(num_classes)])
    y = np.repeat(np.arange(num_classes), n_per_class)
    x = templates[y][:, None] + sigma[y][:, None, None, None] * rng.normal(size=(len(y), 1, size, size))
    return Dataset(np.clip(x, 0.0, 1.0), y, num_classes)


# ---------------------------------------------------------------- IDX

def _read_idx(path, expected_magic: int) -> tuple[tuple[int, ...], np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise DataError("truncated")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expected_magic:
        raise DataError("bad magic")
    ndim = magic & 0xFF
    if len(buf) < 4 + 4 * ndim:
        raise DataError("truncated")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    count = int(np.prod(dims))
    body = buf[4 + 4 * ndim:]
    if len(body) < count:
        raise DataError("truncated")
    return dims, np.frombuffer(body[:count], dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an unsigned-byte IDX image/label pair; pixels are scaled to [0, 1]."""
    dims, images = _read_idx(images_path, IDX_IMAGES)
    _, labels = _read_idx(labels_path, IDX_LABELS)
    if dims[0] != len(labels):
        raise DataError(f"count mismatch: {dims[0]} images, {len(labels)} labels")
    if num_classes is None:
        num_classes = max(2, int(labels.max()) + 1 if len(labels) else 2)
    x = images.astype(np.float64)[:, None] / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (used for fixtures and round trips)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    Path(path).write_bytes(struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
                           + array.tobytes())


# ---------------------------------------------------------------- containers

def save_dataset(ds: Dataset, path, config_text: str = "") -> None:
    header = json.dumps({"num_classes": ds.num_classes, "feature_shape": list(ds.feature_shape),
                         "config": config_text})
    write_container(path, DATASET_MAGIC, header, {"x": ds.x, "y": ds.y.astype(np.float64)})


def load_dataset(path) -> Dataset:
    header, arrays = read_container(path, DATASET_MAGIC)
    try:
        meta = json.loads(header)
    except ValueError as exc:
        raise ContainerError(f"bad dataset header: {exc}") from exc
    if set(arrays) != {"x", "y"}:
        raise ContainerError("dataset container needs x and y records")
    if tuple(arrays["x"].shape[1:]) != tuple(meta["feature_shape"]):
        raise ContainerError("shape mismatch between header and samples")
    return Dataset(arrays["x"], arrays["y"].astype(np.int64), int(meta["num_classes"]))


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class Augmentation:
    """One concrete member of the augmentation family.

    ``kind`` is ``hflip``, ``pad_crop`` or ``jitter``.  ``seed`` fixes the crop
    offset or the jitter noise, so applying the same augmentation twice gives
    the same result.
    """

    kind: str
    pad: int = 2
    sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("hflip", "pad_crop", "jitter"):
            raise ValueError(f"unknown augmentation {self.kind!r}")


def default_family(image: bool, pad: int = 2, sigma: float = 0.05) -> tuple[Augmentation, ...]:
    if image:
        return (Augmentation("hflip"), Augmentation("pad_crop", pad=pad))
    return (Augmentation("jitter", sigma=sigma),)


def sample_augmentation(family, rng: np.random.Generator) -> Augmentation:
    """Draw a family member and give it a fresh seed."""
    base = family[int(rng.integers(len(family)))]
    return Augmentation(base.kind, base.pad, base.sigma, int(rng.integers(2**31)))


def augment(x, a: Augmentation) -> Tensor:
    """Apply ``a`` to one sample or a batch; differentiable w.r.t. ``x``.

    Images are (C, H, W) or (n, C, H, W); 2-D points are (2,) or (n, 2).
    """
    x = T.as_tensor(x)
    image = x.ndim >= 3
    if a.kind == "hflip":
        if not image:
            raise DataError("hflip needs image data")
        return T.flip(x, -1)
    if a.kind == "pad_crop":
        if not image:
            raise DataError("pad_crop is not defined for 2-D point data")
        rng = np.random.default_rng(a.seed)
        top, left = (int(v) for v in rng.integers(0, 2 * a.pad + 1, size=2))
        h, w = x.shape[-2:]
        return T.crop2d(T.pad2d(x, a.pad), top, left, h, w)
    if a.sigma == 0:
        return x
    noise = a.sigma * np.random.default_rng(a.seed).normal(size=x.shape)
    out = T.add(x, noise)
    return T.clip(out, 0.0, 1.0) if image else out
