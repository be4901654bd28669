"""End-to-end inference, external-mask refinement and recompositing."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, DataError
from .imagery import as_image, as_matte, resize
from .nets import load_checkpoint, mpn_forward, mrn_forward, qun_forward, save_checkpoint
from .synthdata import composite

BUNDLE_VERSION = "coarsematte-bundle 1"
MIN_INPUT = 64


@dataclass
class ModelBundle:
    mpn: object
    qun: object
    mrn: object
    version: str = BUNDLE_VERSION

    def __post_init__(self):
        lows = {self.mpn.config.low_res, self.qun.config.low_res, self.mrn.config.low_res}
        if len(lows) != 1:
            raise ValueError(f"networks disagree on low_res: {sorted(lows)}")
        for net in (self.mpn, self.qun, self.mrn):
            net.eval()
            for p in net.parameters():
                p.requires_grad_(False)

    @property
    def grid_multiple(self) -> int:
        """Working-grid sizes must be multiples of this."""
        low_depth = max(self.mpn.config.depth, self.qun.config.depth)
        return math.lcm(2 ** self.mrn.config.depth, self.mrn.config.scale_gap * 2 ** low_depth)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for net in (self.mpn, self.qun, self.mrn):
            save_checkpoint(net, out / f"{net.net_id}.mkpt")
        (out / "bundle.txt").write_text(self.version + "\n", encoding="utf-8")

    @classmethod
    def load(cls, models_dir) -> "ModelBundle":
        d = Path(models_dir)
        if not d.is_dir():
            raise CheckpointError(f"{d}: no such model directory")
        nets = {name: load_checkpoint(d / f"{name}.mkpt", net=name) for name in ("mpn", "qun", "mrn")}
        version_file = d / "bundle.txt"
        version = version_file.read_text(encoding="utf-8").strip() if version_file.is_file() else BUNDLE_VERSION
        return cls(version=version, **nets)


@dataclass
class MatteResult:
    alpha: np.ndarray  # (H, W) at input resolution
    fg_rgb: np.ndarray  # (H, W, 3) at input resolution
    coarse_mask: np.ndarray  # low-res mask fed to QUN
    unified_mask: np.ndarray  # low-res QUN output fed to MRN


def working_grid(h: int, w: int, multiple: int, grid_range=(256, 1024)) -> tuple[int, int]:
    """Size the image is processed at: multiples of ``multiple`` inside ``grid_range``.

    Oversized or undersized inputs are first scaled uniformly so that
    the aspect ratio survives; each side is then rounded to the nearest
    allowed multiple.
    """
    lo, hi = grid_range
    lo_ok = multiple * math.ceil(lo / multiple)
    hi_ok = max(lo_ok, multiple * (hi // multiple))
    s = 1.0
    if max(h, w) > hi_ok:
        s = hi_ok / max(h, w)
    if min(h, w) * s < lo_ok:
        s = lo_ok / min(h, w)

    def fit(n):
        return int(min(max(multiple * round(n * s / multiple), lo_ok), hi_ok))

    return fit(h), fit(w)


def _prepare(img, m: ModelBundle):
    img = as_image(img)
    h, w = img.shape[:2]
    if h < MIN_INPUT or w < MIN_INPUT:
        raise DataError(f"input {h}x{w} is smaller than {MIN_INPUT}x{MIN_INPUT}")
    gh, gw = working_grid(h, w, m.grid_multiple, m.mrn.config.grid_range)
    work = resize(img, gh, gw)
    gap = m.mrn.config.scale_gap
    low = resize(work, gh // gap, gw // gap)
    return img, work, low


def _refine(img, work, low, coarse, m: ModelBundle) -> MatteResult:
    unified = qun_forward(m.qun, low, coarse)
    out = mrn_forward(m.mrn, work, unified)
    h, w = img.shape[:2]
    return MatteResult(
        alpha=resize(out[:, :, 3], h, w),
        fg_rgb=resize(out[:, :, :3], h, w),
        coarse_mask=coarse,
        unified_mask=unified,
    )


def infer(img, m: ModelBundle) -> MatteResult:
    """Predict an alpha matte and foreground colors from an image alone."""
    img, work, low = _prepare(img, m)
    coarse = mpn_forward(m.mpn, low)[:, :, 0]
    return _refine(img, work, low, coarse, m)


def refine_external_mask(img, coarse, m: ModelBundle) -> MatteResult:
    """Refine a mask from another source (annotation, segmenter) with QUN and MRN."""
    img, work, low = _prepare(img, m)
    coarse = as_matte(coarse)
    if not coarse.any():
        warnings.warn("external mask is all zero; refining anyway", RuntimeWarning, stacklevel=2)
    return _refine(img, work, low, resize(coarse, *low.shape[:2]), m)


def recomposite(r: MatteResult, bg, image=None, resize_bg: bool = True) -> np.ndarray:
    """Composite the prediction over a new background.

    Uses the predicted foreground colors, or ``image`` when it is given.
    """
    bg = as_image(bg)
    h, w = r.alpha.shape
    if bg.shape[:2] != (h, w):
        if not resize_bg:
            raise ValueError(f"background {bg.shape[:2]} does not match result {(h, w)}")
        bg = resize(bg, h, w)
    fg = r.fg_rgb if image is None else as_image(image)
    return composite(fg, r.alpha, bg)
