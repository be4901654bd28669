"""Synthetic coarsening of fine alpha mattes.

QUN needs paired masks of different annotation quality for the same
image. Fine mattes are degraded with binarization, grayscale morphology
and a small box blur, applied in that order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .imagery import Rng, as_matte


@dataclass
class DegradeSpec:
    """Parameters of the random degradation pipeline.

    ``morph_radius_range`` is inclusive on both ends. When the morphology
    step fires, dilation and erosion are chosen with equal probability.
    """

    blur_sizes: tuple = (3, 5)
    binarize_threshold: float = 0.5
    morph_radius_range: tuple = (1, 3)
    p_binarize: float = 0.5
    p_morph: float = 0.5
    p_blur: float = 1.0

    def __post_init__(self):
        self.blur_sizes = tuple(int(s) for s in self.blur_sizes)
        self.morph_radius_range = tuple(int(r) for r in self.morph_radius_range)
        if not self.blur_sizes:
            raise ValueError("blur_sizes must not be empty")
        for s in self.blur_sizes:
            if s < 3 or s % 2 == 0:
                raise ValueError(f"blur sizes must be odd and >= 3, got {s}")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ValueError("binarize_threshold must lie in (0, 1)")
        lo, hi = self.morph_radius_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad morph_radius_range {self.morph_radius_range}")
        for name in ("p_binarize", "p_morph", "p_blur"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")

    @classmethod
    def disabled(cls) -> "DegradeSpec":
        return cls(p_binarize=0.0, p_morph=0.0, p_blur=0.0)

    @classmethod
    def from_dict(cls, values: dict) -> "DegradeSpec":
        kwargs = {}
        for key, raw in values.items():
            if key not in cls.__dataclass_fields__:
                raise ValueError(f"unknown degrade option {key!r}")
            if key in ("blur_sizes", "morph_radius_range"):
                kwargs[key] = tuple(int(v) for v in str(raw).split(","))
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)


def blur(mask, size: int) -> np.ndarray:
    """Normalized box filter with edge-replicate padding."""
    if size < 3 or size % 2 == 0:
        raise ValueError(f"blur size must be odd and >= 3, got {size}")
    out = ndimage.uniform_filter(as_matte(mask), size=size, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def binarize(mask, t: float) -> np.ndarray:
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    return (as_matte(mask) >= t).astype(np.float64)


def dilate(mask, radius: int) -> np.ndarray:
    """Grayscale max filter over a (2r+1)x(2r+1) square."""
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    return ndimage.maximum_filter(as_matte(mask), size=2 * radius + 1, mode="nearest")


def erode(mask, radius: int) -> np.ndarray:
    """Grayscale min filter over a (2r+1)x(2r+1) square."""
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    return ndimage.minimum_filter(as_matte(mask), size=2 * radius + 1, mode="nearest")


@dataclass
class DegradeStep:
    op: str
    arg: float

    def apply(self, mask):
        return {"binarize": binarize, "dilate": dilate, "erode": erode, "blur": blur}[self.op](mask, self.arg)


def sample_steps(spec: DegradeSpec, rng: Rng) -> list[DegradeStep]:
    """Draw the operator sequence for one degradation.

    Every coin is drawn regardless of outcome so the number of draws is
    fixed, which keeps sequences stable when probabilities change.
    """
    coins = rng.uniform(size=4)
    lo, hi = spec.morph_radius_range
    radius = int(rng.integers(lo, hi + 1))
    size = spec.blur_sizes[int(rng.integers(0, len(spec.blur_sizes)))]
    steps = []
    if coins[0] < spec.p_binarize:
        steps.append(DegradeStep("binarize", spec.binarize_threshold))
    if coins[1] < spec.p_morph:
        steps.append(DegradeStep("dilate" if coins[2] < 0.5 else "erode", radius))
    if coins[3] < spec.p_blur:
        steps.append(DegradeStep("blur", size))
    return steps


def degrade(alpha, spec: DegradeSpec | None = None, rng: Rng | None = None) -> np.ndarray:
    """Produce a coarse mask from a fine matte; deterministic given ``rng``."""
    spec = spec or DegradeSpec()
    rng = rng if rng is not None else Rng(0)
    out = as_matte(alpha).copy()
    for step in sample_steps(spec, rng):
        out = step.apply(out)
    return out
