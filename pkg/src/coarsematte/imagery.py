"""Image and matte arrays, PNG I/O, bilinear resizing and seeded randomness.

Images are ``float64`` arrays of shape (H, W, 3) and mattes are (H, W),
both with values in [0, 1]. Quantization to 8 bits happens only when
reading or writing files.
"""
from __future__ import annotations

import enum
import zlib
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from .errors import ImageIOError


class Quality(str, enum.Enum):
    FINE = "fine"
    COARSE = "coarse"


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------

def _key_word(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    key = int(key)
    if key < 0:
        raise ValueError("rng keys must be non-negative")
    return key


class Rng:
    """Counter-based, splittable random source.

    Each ``Rng`` wraps a Philox stream keyed by ``(seed, *path)``. ``split``
    derives an independent child from a key, so the draws for a given
    record or augmentation depend only on its key, not on how many draws
    were made elsewhere.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32, *(_key_word(k) for k in self.path)]
        self.generator = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def split(self, *key) -> "Rng":
        return Rng(self.seed, self.path + key)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        """Integers in [low, high)."""
        return self.generator.integers(low, high, size)

    def random(self) -> float:
        return float(self.generator.random())

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False):
        return self.generator.choice(n, size=size, replace=replace)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


# ---------------------------------------------------------------------------
# Validation helpers
# ---------------------------------------------------------------------------

def as_image(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"expected an (H, W, 3) image, got shape {x.shape}")
    return x


def as_matte(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape[2] == 1:
        x = x[:, :, 0]
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"expected an (H, W) matte, got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def read_raster(path) -> np.ndarray:
    """Read a raster as floats in [0, 1] with its native channels.

    Returns (H, W) for grayscale files, (H, W, 3) or (H, W, 4) otherwise.
    """
    path = Path(path)
    if not path.is_file():
        raise ImageIOError(path, "no such file")
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode in ("L", "RGB", "RGBA"):
                pass
            elif im.mode in ("LA", "PA") or (im.mode == "P" and "transparency" in im.info):
                im = im.convert("RGBA")
            elif im.mode in ("1", "I", "I;16", "F"):
                im = im.convert("L")
            else:
                im = im.convert("RGB")
            data = np.asarray(im)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageIOError(path, f"cannot decode image ({exc})") from exc
    return data.astype(np.float64) / 255.0


def load_image(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Load a photograph as an (H, W, 3) image.

    A 4-channel file yields its alpha channel as the second element;
    otherwise the second element is ``None``. Grayscale files are
    replicated to three channels.
    """
    data = read_raster(path)
    if data.ndim == 2:
        return np.repeat(data[:, :, None], 3, axis=2), None
    if data.shape[2] == 4:
        return np.ascontiguousarray(data[:, :, :3]), np.ascontiguousarray(data[:, :, 3])
    return data, None


def load_matte(path) -> np.ndarray:
    """Load a single-channel matte. Color files are reduced to their first channel."""
    data = read_raster(path)
    if data.ndim == 3:
        data = data[:, :, 3] if data.shape[2] == 4 else data[:, :, 0]
    return np.ascontiguousarray(data)


def to_uint8(x) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(x, path) -> None:
    """Write an image (H, W, 3), RGBA (H, W, 4) or matte (H, W) as 8-bit PNG."""
    path = Path(path)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape[2] == 1:
        x = x[:, :, 0]
    if not (x.ndim == 2 or (x.ndim == 3 and x.shape[2] in (3, 4))):
        raise ValueError(f"cannot save array of shape {x.shape}")
    if not path.parent.is_dir():
        raise ImageIOError(path, "parent directory does not exist")
    try:
        PILImage.fromarray(to_uint8(x)).save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(path, f"cannot write ({exc})") from exc


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def _linear_taps(n_in: int, n_out: int):
    # half-pixel centers: output pixel j samples input coordinate (j + 0.5) * n_in / n_out - 0.5
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize(x, h: int, w: int) -> np.ndarray:
    """Bilinear resize of an image or matte to (h, w).

    Uses half-pixel-centered sampling with edge clamping, so each output
    value is a convex combination of input values.
    """
    if int(h) < 1 or int(w) < 1:
        raise ValueError(f"target size must be positive, got {h}x{w}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 3):
        raise ValueError(f"cannot resize array of shape {x.shape}")
    h, w = int(h), int(w)
    if x.shape[:2] == (h, w):
        return x.copy()
    lo, hi, f = _linear_taps(x.shape[0], h)
    extra = (None,) * (x.ndim - 2)
    fr = f[(slice(None), None) + extra]
    a = x[lo]
    rows = a + (x[hi] - a) * fr
    lo, hi, f = _linear_taps(x.shape[1], w)
    fc = f[(None, slice(None)) + extra]
    a = rows[:, lo]
    out = a + (rows[:, hi] - a) * fc
    # guard against one-ulp overshoot
    return np.clip(out, x.min(), x.max())
