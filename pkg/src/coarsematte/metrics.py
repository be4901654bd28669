"""Matting error metrics and the evaluation driver.

All four metrics are computed over the whole image on [0, 1] mattes and
divided by the pixel count.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError
from .imagery import as_matte, load_image, load_matte

log = logging.getLogger(__name__)

GRAD_SIGMA = 1.4
GRAD_Q = 2.0
CONN_THETA = 0.15
CONN_STEP = 0.1
# Omega and threshold comparisons tolerate this much below the nominal level
OPAQUE_TOL = 1e-6
# 4-connectivity
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def _pair(pred, gt):
    pred, gt = as_matte(pred), as_matte(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def sad(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.abs(pred - gt).mean())


def mse(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(((pred - gt) ** 2).mean())


def gaussian_derivative_kernels(sigma: float):
    """First-order Gaussian derivative filters (d/dx, d/dy), unit L2 norm.

    The half-width is chosen where the Gaussian falls to 1% of
    1 / (sqrt(2 pi) sigma), as in the usual alpha-matting evaluation code.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    eps = 1e-2
    half = int(np.ceil(sigma * np.sqrt(-2.0 * np.log(np.sqrt(2.0 * np.pi) * sigma * eps))))
    u = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-u ** 2 / (2 * sigma ** 2)) / (sigma * np.sqrt(2 * np.pi))
    dg = -u * g / sigma ** 2
    hx = np.outer(g, dg)  # varies along columns
    hx /= np.sqrt((hx ** 2).sum())
    return hx, hx.T.copy()


def image_gradient(a, sigma: float = GRAD_SIGMA):
    hx, hy = gaussian_derivative_kernels(sigma)
    a = as_matte(a)
    return (ndimage.convolve(a, hx, mode="nearest"),
            ndimage.convolve(a, hy, mode="nearest"))


def gradient_error(pred, gt, sigma: float = GRAD_SIGMA, q: float = GRAD_Q) -> float:
    """Mean over pixels of ||grad(pred) - grad(gt)||^q."""
    pred, gt = _pair(pred, gt)
    px, py = image_gradient(pred, sigma)
    gx, gy = image_gradient(gt, sigma)
    norm = np.sqrt((px - gx) ** 2 + (py - gy) ** 2)
    return float((norm ** q).mean())


def thresholds(step: float):
    n = int(np.floor(1.0 / step + 1e-9))
    return [k * step for k in range(n + 1)]


def opaque_region(pred, gt) -> np.ndarray:
    """Largest 4-connected region where both mattes are fully opaque."""
    both = (pred >= 1.0 - OPAQUE_TOL) & (gt >= 1.0 - OPAQUE_TOL)
    labels, n = ndimage.label(both, structure=FOUR_CONNECTED)
    if n == 0:
        return np.zeros_like(both)
    sizes = np.bincount(labels.ravel())[1:]
    # ties resolve to the lowest label, i.e. first in raster order
    return labels == (int(np.argmax(sizes)) + 1)


def connection_levels(a, omega, step: float = CONN_STEP) -> np.ndarray:
    """Per pixel, the largest threshold at which it stays 4-connected to ``omega``."""
    seed = np.unravel_index(int(np.argmax(omega)), omega.shape)
    level = np.zeros_like(a)
    for t in thresholds(step)[1:]:
        labels, _ = ndimage.label(a >= t - OPAQUE_TOL, structure=FOUR_CONNECTED)
        connected = labels == labels[seed]
        if not connected.any():
            break
        level[connected] = t
    return level


def connectivity_error(pred, gt, theta: float = CONN_THETA, step: float = CONN_STEP) -> float:
    """Mean over pixels of |phi(pred) - phi(gt)|.

    phi = 1 - d * [d >= theta] with d = a - l, where l is the pixel's
    connection level to the shared fully-opaque region. If the mattes share
    no fully-opaque pixel the error falls back to the mean absolute difference.
    """
    if not 0.0 < theta < 1.0 or not 0.0 < step < 1.0:
        raise ValueError("theta and step must lie in (0, 1)")
    pred, gt = _pair(pred, gt)
    omega = opaque_region(pred, gt)
    if not omega.any():
        return float(np.abs(pred - gt).mean())

    def phi(a):
        d = a - connection_levels(a, omega, step)
        return 1.0 - np.where(d >= theta, d, 0.0)

    return float(np.abs(phi(pred) - phi(gt)).mean())


METRICS = {"sad": sad, "mse": mse, "grad": gradient_error, "conn": connectivity_error}
COLUMNS = ("sad", "mse", "grad", "conn")
TABLE_NAMES = {"sad": "SAD", "mse": "MSE", "grad": "Gradient", "conn": "Connectivity"}


def all_metrics(pred, gt) -> dict:
    return {name: fn(pred, gt) for name, fn in METRICS.items()}


@dataclass
class EvalReport:
    per_image: list = field(default_factory=list)
    constants: dict = field(default_factory=lambda: {
        "grad_sigma": GRAD_SIGMA, "grad_q": GRAD_Q, "conn_theta": CONN_THETA, "conn_step": CONN_STEP,
    })

    @property
    def aggregate(self) -> dict:
        if not self.per_image:
            return {c: float("nan") for c in COLUMNS}
        return {c: float(np.mean([row[c] for row in self.per_image])) for c in COLUMNS}

    def aggregate_row(self) -> str:
        agg = self.aggregate
        head = "\t".join(TABLE_NAMES[c] for c in COLUMNS)
        return head + "\n" + "\t".join(f"{agg[c]:.6g}" for c in COLUMNS)

    def write(self, path) -> None:
        consts = " ".join(f"{k}={v}" for k, v in self.constants.items())
        lines = [f"# coarsematte-eval v1 {consts}", "\t".join(("id",) + COLUMNS)]
        for row in self.per_image:
            lines.append("\t".join([row["id"]] + [repr(float(row[c])) for c in COLUMNS]))
        agg = self.aggregate
        lines.append("\t".join(["mean"] + [repr(agg[c]) for c in COLUMNS]))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def evaluate(manifest, infer_fn, split: str | None = "test") -> EvalReport:
    """Run ``infer_fn(image) -> alpha`` on every selected record and score it.

    ``split=None`` evaluates every record regardless of split.
    """
    records = [r for r in manifest.records if split is None or r.split == split]
    if not records:
        raise DataError(f"nothing to evaluate (no records with split {split!r})")
    report = EvalReport()
    for rec in records:
        img, _ = load_image(manifest.resolve(rec.composite_path))
        gt = load_matte(manifest.resolve(rec.alpha_path))
        pred = as_matte(infer_fn(img))
        if pred.shape != gt.shape:
            raise DataError(f"{rec.id}: prediction {pred.shape} vs ground truth {gt.shape}")
        report.per_image.append({"id": rec.id, **all_metrics(pred, gt)})
        log.debug("%s %s", rec.id, report.per_image[-1])
    return report
