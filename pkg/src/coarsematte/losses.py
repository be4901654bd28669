"""Training objectives for the three networks.

Every L1 norm is reduced as a mean over elements, so the weighted mixes
do not depend on resolution. Inputs may be numpy arrays or tensors;
tensors keep their autograd graph.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class LossWeights:
    lambda_L: float = 0.5  # foreground vs background mask terms (MPN)
    lambda_1: float = 0.25  # identity term (QUN)
    lambda_2: float = 0.5  # consistency term (QUN)
    lambda_H: float = 0.5  # RGB vs alpha terms (MRN)

    def __post_init__(self):
        for name in ("lambda_L", "lambda_1", "lambda_2", "lambda_H"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


DEFAULT_WEIGHTS = LossWeights()


def _t(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def l1_mean(a, b):
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    # autograd takes the subgradient of |d| at 0 to be 0
    return (a - b).abs().mean()


def _split_channels(x, n):
    """Split the channel axis of an (H, W, C), (C, H, W) or (N, C, H, W) array."""
    x = _t(x)
    if x.ndim == 3 and x.shape[-1] == n:
        return [x[..., i] for i in range(n)]
    if x.ndim == 3 and x.shape[0] == n:
        return [x[i] for i in range(n)]
    if x.ndim == 4 and x.shape[1] == n:
        return [x[:, i] for i in range(n)]
    raise ValueError(f"expected {n} channels, got shape {tuple(x.shape)}")


def mpn_loss(pred, gt_fg, gt_bg, w: LossWeights = DEFAULT_WEIGHTS):
    """lambda_L * |fg_pred - fg_gt| + (1 - lambda_L) * |bg_pred - bg_gt|."""
    fg, bg = _split_channels(pred, 2)
    return w.lambda_L * l1_mean(fg, gt_fg) + (1.0 - w.lambda_L) * l1_mean(bg, gt_bg)


def qun_identity_loss(qx, x_mask, qx2, x2_mask):
    # Q(x) is a mask while x also carries the image, so Q(x) is compared to x's mask channel
    return l1_mean(qx, x_mask) + l1_mean(qx2, x2_mask)


def qun_consistency_loss(qx, qx2):
    return l1_mean(qx, qx2)


def qun_loss(qx, x_mask, qx2, x2_mask, w: LossWeights = DEFAULT_WEIGHTS):
    return (w.lambda_1 * qun_identity_loss(qx, x_mask, qx2, x2_mask)
            + w.lambda_2 * qun_consistency_loss(qx, qx2))


def mrn_loss(pred, gt_rgb, gt_alpha, w: LossWeights = DEFAULT_WEIGHTS):
    """lambda_H * |RGB_pred - RGB_gt| + (1 - lambda_H) * |alpha_pred - alpha_gt|.

    ``pred`` holds four channels (RGB then alpha); ``gt_rgb`` must use the
    same layout as the first three of them.
    """
    pred = _t(pred)
    if pred.ndim == 3 and pred.shape[-1] == 4:
        rgb, alpha = pred[..., :3], pred[..., 3]
    elif pred.ndim == 3 and pred.shape[0] == 4:
        rgb, alpha = pred[:3], pred[3]
    elif pred.ndim == 4 and pred.shape[1] == 4:
        rgb, alpha = pred[:, :3], pred[:, 3]
    else:
        raise ValueError(f"expected 4 channels, got shape {tuple(pred.shape)}")
    return w.lambda_H * l1_mean(rgb, gt_rgb) + (1.0 - w.lambda_H) * l1_mean(alpha, gt_alpha)
