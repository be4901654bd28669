"""Three-stage training: MPN on all data, then QUN, then MRN on fine data.

Each stage freezes the networks trained before it. Data order, flips,
crops and degradations are drawn from ``Rng`` children keyed by stage,
epoch and sample, so a fixed seed reproduces a run exactly.
"""
from __future__ import annotations

import logging
import time
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import losses
from .degrade import DegradeSpec, degrade
from .errors import DataError, NumericalError
from .imagery import Quality, Rng, load_image, load_matte, resize
from .nets import NetConfig, init_params, param_digest, save_checkpoint
from .pipeline import ModelBundle

log = logging.getLogger(__name__)

ORDER = ("mpn", "qun", "mrn")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mpn_epochs: int = 20
    qun_epochs: int = 20
    mrn_epochs: int = 20
    batch_mpn: int = 16
    batch_qun: int = 16
    batch_mrn: int = 1
    crop: tuple = (768, 640)
    low_res: tuple = (192, 160)
    seed: int = 0
    # None means no limit
    max_steps_mpn: int | None = None
    max_steps_qun: int | None = None
    max_steps_mrn: int | None = None
    # plateau early stop for QUN and MRN; 0 disables
    patience: int = 3
    min_delta: float = 1e-4
    mpn_width: int = 32
    mpn_depth: int = 4
    qun_width: int = 16
    qun_depth: int = 3
    mrn_width: int = 32
    mrn_depth: int = 4
    grid_min: int = 256
    grid_max: int = 1024
    flip: bool = True
    qun_source: str = "mpn"  # "mpn": x uses the frozen MPN's mask; "gt": x uses the fine annotation
    mrn_mask_source: str = "pipeline"  # "pipeline": frozen MPN -> QUN; "gt": downsampled fine alpha
    crop_min_fg: float = 0.02
    crop_tries: int = 10

    def __post_init__(self):
        self.crop = tuple(int(v) for v in self.crop)
        self.low_res = tuple(int(v) for v in self.low_res)
        for name in ("batch_mpn", "batch_qun", "batch_mrn"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.qun_source not in ("mpn", "gt"):
            raise ValueError("qun_source must be 'mpn' or 'gt'")
        if self.mrn_mask_source not in ("pipeline", "gt"):
            raise ValueError("mrn_mask_source must be 'pipeline' or 'gt'")
        low_mult = 2 ** max(self.mpn_depth, self.qun_depth)
        for c, lr in zip(self.crop, self.low_res):
            if c % (2 ** self.mrn_depth) or c % 4 or (c // 4) % low_mult:
                raise ValueError(f"crop {self.crop} must be divisible by 2^mrn_depth and 4 * 2^max(mpn,qun depth)")
            if lr % low_mult:
                raise ValueError(f"low_res {self.low_res} must be divisible by {low_mult}")

    def net_config(self, net: str) -> NetConfig:
        width, depth = {"mpn": (self.mpn_width, self.mpn_depth), "qun": (self.qun_width, self.qun_depth),
                        "mrn": (self.mrn_width, self.mrn_depth)}[net]
        return NetConfig(base_width=width, depth=depth, low_res=self.low_res,
                         high_res=tuple(4 * v for v in self.low_res),
                         grid_range=(self.grid_min, self.grid_max))


def _coerce(raw: str, tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.strip().lower() in ("none", ""):
            return None
        return _coerce(raw, args[0])
    if tp is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if tp is tuple:
        return tuple(int(v) for v in raw.split(","))
    return tp(raw)


def parse_kv(text: str) -> dict:
    """Parse ``key<TAB>value`` lines; '#' starts a comment line."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"line {lineno}: expected 'key<TAB>value', got {line!r}")
        out[parts[0].strip()] = parts[1].strip()
    return out


def config_from_dict(values: dict) -> TrainConfig:
    hints = typing.get_type_hints(TrainConfig)
    kwargs = {}
    for key, raw in values.items():
        if key not in hints:
            raise DataError(f"unknown config key {key!r}")
        try:
            kwargs[key] = _coerce(raw, hints[key])
        except ValueError as exc:
            raise DataError(f"config key {key!r}: {exc}") from None
    try:
        return TrainConfig(**kwargs)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def load_config(path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such config file")
    return config_from_dict(parse_kv(path.read_text(encoding="utf-8")))


def save_config(cfg: TrainConfig, path) -> None:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name}\t{','.join(map(str, v)) if isinstance(v, tuple) else v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    id: str
    image: np.ndarray
    alpha: np.ndarray
    fg: np.ndarray
    quality: Quality


def load_samples(manifest, split="train", quality=None) -> list[Sample]:
    out = []
    for rec in manifest.select(split=split, quality=quality).records:
        img, _ = load_image(manifest.resolve(rec.composite_path))
        fg, _ = load_image(manifest.resolve(rec.fg_path))
        alpha = load_matte(manifest.resolve(rec.alpha_path))
        out.append(Sample(rec.id, img, alpha, fg, rec.quality))
    return out


def random_flip(img, alpha, rng: Rng, *extra, p: float = 0.5):
    """Horizontally flip the image and every paired array together with probability ``p``."""
    arrays = (img, alpha) + extra
    if rng.random() < p:
        return tuple(np.ascontiguousarray(a[:, ::-1]) for a in arrays)
    return arrays


def _pad_to(a, h, w):
    ph, pw = max(0, h - a.shape[0]), max(0, w - a.shape[1])
    if not ph and not pw:
        return a
    pad = [(ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)] + [(0, 0)] * (a.ndim - 2)
    return np.pad(a, pad, mode="reflect" if min(a.shape[:2]) > 1 else "edge")


def crop_box(alpha, size, rng: Rng, min_fg: float = 0.0, tries: int = 1) -> tuple[int, int]:
    """Top-left corner of a crop, redrawn up to ``tries`` times until its mean alpha exceeds ``min_fg``."""
    h, w = size
    H, W = alpha.shape[:2]
    box = (0, 0)
    for _ in range(max(1, tries)):
        box = (int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1)))
        if alpha[box[0]:box[0] + h, box[1]:box[1] + w].mean() > min_fg:
            break
    return box


def random_crop(img, alpha, size, rng: Rng, *extra, min_fg: float = 0.0, tries: int = 1):
    """Crop every array at the same location; inputs smaller than ``size`` are reflect-padded first."""
    h, w = size
    arrays = [_pad_to(a, h, w) for a in (img, alpha) + extra]
    top, left = crop_box(arrays[1], size, rng, min_fg, tries)
    return tuple(a[top:top + h, left:left + w] for a in arrays)


def _nchw(batch):
    a = np.stack(batch)
    if a.ndim == 3:
        a = a[:, None]
    else:
        a = a.transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))


# ---------------------------------------------------------------------------
# Stage machinery
# ---------------------------------------------------------------------------

@dataclass
class StageResult:
    stage: str
    params: torch.nn.Module
    losses: list = field(default_factory=list)  # per optimizer step
    epoch_losses: list = field(default_factory=list)
    seen: set = field(default_factory=set)  # sample ids that entered a batch
    steps: int = 0
    final_loss: float = float("nan")


class _Stage:
    def __init__(self, name, model, cfg: TrainConfig, log_file=None):
        self.name = name
        self.model = model
        self.cfg = cfg
        self.opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
        self.result = StageResult(name, model)
        self.log_file = log_file
        self.t0 = time.perf_counter()

    def step(self, loss):
        if not torch.isfinite(loss):
            raise NumericalError(f"{self.name} step {self.result.steps}: non-finite loss {loss.item()}")
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        for name, p in self.model.named_parameters():
            if not torch.isfinite(p).all():
                raise NumericalError(f"{self.name} step {self.result.steps}: non-finite values in {name}")
        value = float(loss.item())
        self.result.losses.append(value)
        if self.log_file is not None:
            self.log_file.write(
                f"{self.name}\t{self.result.steps}\t{value:.8g}\t{self.cfg.lr:g}\t{time.perf_counter() - self.t0:.3f}\n"
            )
        self.result.steps += 1

    def done(self, max_steps):
        return max_steps is not None and self.result.steps >= max_steps


def _plateau(epoch_losses, patience, min_delta):
    if not patience or len(epoch_losses) <= patience:
        return False
    best_before = min(epoch_losses[:-patience])
    return min(epoch_losses[-patience:]) > best_before - min_delta


def _batches(n, batch, rng: Rng):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


@torch.no_grad()
def _low_res_masks(mpn, batch_img):
    return mpn(batch_img)[:, :1]


def _frozen(*models):
    for m in models:
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def train_mpn(samples, cfg: TrainConfig, rng: Rng | None = None, out_dir=None, log_file=None,
              model=None) -> StageResult:
    """Fit MPN on every training sample, fine and coarse, at ``cfg.low_res``."""
    if not samples:
        raise DataError("no training samples for MPN")
    rng = rng or Rng(cfg.seed)
    h, w = cfg.low_res
    imgs = [resize(s.image, h, w) for s in samples]
    alphas = [resize(s.alpha, h, w) for s in samples]
    model = model or init_params(cfg.net_config("mpn"), "mpn", rng.split("init", "mpn"))
    model.train()
    st = _Stage("mpn", model, cfg, log_file)
    for epoch in range(cfg.mpn_epochs):
        er = rng.split("mpn", epoch)
        epoch_losses = []
        for bi, idx in enumerate(_batches(len(samples), cfg.batch_mpn, er.split("order"))):
            xs, ys = [], []
            for i in idx:
                x, y = imgs[i], alphas[i]
                if cfg.flip:
                    x, y = random_flip(x, y, er.split("flip", int(i)))
                xs.append(x)
                ys.append(y)
                st.result.seen.add(samples[i].id)
            fg = _nchw(ys)[:, 0]
            loss = losses.mpn_loss(model(_nchw(xs)), fg, 1.0 - fg)
            st.step(loss)
            epoch_losses.append(st.result.losses[-1])
            if st.done(cfg.max_steps_mpn):
                break
        st.result.epoch_losses.append(float(np.mean(epoch_losses)))
        if out_dir is not None:
            save_checkpoint(model, Path(out_dir) / "mpn.mkpt")
        if st.done(cfg.max_steps_mpn):
            break
    _frozen(model)
    with torch.no_grad():
        fg = _nchw(alphas)[:, 0]
        st.result.final_loss = float(losses.mpn_loss(model(_nchw(imgs)), fg, 1.0 - fg))
    return st.result


def train_qun(samples, mpn, cfg: TrainConfig, spec: DegradeSpec | None = None, rng: Rng | None = None,
              out_dir=None, log_file=None, model=None) -> StageResult:
    """Fit QUN on fine samples: x = (image, mask), x' = (image, degraded fine mask)."""
    samples = [s for s in samples if s.quality == Quality.FINE]
    if not samples:
        raise DataError("no fine training samples for QUN")
    spec = spec or DegradeSpec()
    rng = rng or Rng(cfg.seed)
    h, w = cfg.low_res
    imgs = [resize(s.image, h, w) for s in samples]
    alphas = [resize(s.alpha, h, w) for s in samples]
    _frozen(mpn)
    mpn_digest = param_digest(mpn)
    model = model or init_params(cfg.net_config("qun"), "qun", rng.split("init", "qun"), zero_head=True)
    model.train()
    st = _Stage("qun", model, cfg, log_file)
    for epoch in range(cfg.qun_epochs):
        er = rng.split("qun", epoch)
        epoch_losses = []
        for idx in _batches(len(samples), cfg.batch_qun, er.split("order")):
            xs, fine, coarse = [], [], []
            for i in idx:
                x, y = imgs[i], alphas[i]
                if cfg.flip:
                    x, y = random_flip(x, y, er.split("flip", int(i)))
                xs.append(x)
                fine.append(y)
                coarse.append(degrade(y, spec, er.split("degrade", int(i))))
                st.result.seen.add(samples[i].id)
            img_t = _nchw(xs)
            x_mask = _low_res_masks(mpn, img_t) if cfg.qun_source == "mpn" else _nchw(fine)
            x2_mask = _nchw(coarse)
            qx, qx2 = model(img_t, x_mask), model(img_t, x2_mask)
            st.step(losses.qun_loss(qx, x_mask, qx2, x2_mask))
            epoch_losses.append(st.result.losses[-1])
            if st.done(cfg.max_steps_qun):
                break
        st.result.epoch_losses.append(float(np.mean(epoch_losses)))
        if out_dir is not None:
            save_checkpoint(model, Path(out_dir) / "qun.mkpt")
        if st.done(cfg.max_steps_qun) or _plateau(st.result.epoch_losses, cfg.patience, cfg.min_delta):
            break
    if param_digest(mpn) != mpn_digest:
        raise RuntimeError("frozen MPN parameters changed during QUN training")
    _frozen(model)
    st.result.final_loss = st.result.epoch_losses[-1]
    return st.result


def mrn_inputs(crop_img, crop_alpha, mpn, qun, source="pipeline"):
    """Quarter-resolution mask that MRN receives for a crop."""
    h, w = crop_img.shape[:2]
    if source == "gt":
        return resize(crop_alpha, h // 4, w // 4)
    low = _nchw([resize(crop_img, h // 4, w // 4)])
    with torch.no_grad():
        unified = qun(low, mpn(low)[:, :1])
    return unified[0, 0].numpy().astype(np.float64)


def train_mrn(samples, mpn, qun, cfg: TrainConfig, rng: Rng | None = None, out_dir=None, log_file=None,
              model=None) -> StageResult:
    """Fit MRN on fine samples only, on random crops of ``cfg.crop``."""
    samples = [s for s in samples if s.quality == Quality.FINE]
    if not samples:
        raise DataError("no fine training samples for MRN")
    rng = rng or Rng(cfg.seed)
    _frozen(mpn, qun)
    digests = (param_digest(mpn), param_digest(qun))
    model = model or init_params(cfg.net_config("mrn"), "mrn", rng.split("init", "mrn"))
    model.train()
    st = _Stage("mrn", model, cfg, log_file)
    for epoch in range(cfg.mrn_epochs):
        er = rng.split("mrn", epoch)
        epoch_losses = []
        for idx in _batches(len(samples), cfg.batch_mrn, er.split("order")):
            xs, masks, rgbs, ys = [], [], [], []
            for i in idx:
                s = samples[i]
                x, y, f = random_crop(s.image, s.alpha, cfg.crop, er.split("crop", int(i)), s.fg,
                                      min_fg=cfg.crop_min_fg, tries=cfg.crop_tries)
                if cfg.flip:
                    x, y, f = random_flip(x, y, er.split("flip", int(i)), f)
                xs.append(x)
                ys.append(y)
                rgbs.append(f)
                masks.append(mrn_inputs(x, y, mpn, qun, cfg.mrn_mask_source))
                st.result.seen.add(s.id)
            pred = model(_nchw(xs), _nchw(masks))
            st.step(losses.mrn_loss(pred, _nchw(rgbs), _nchw(ys)[:, 0]))
            epoch_losses.append(st.result.losses[-1])
            if st.done(cfg.max_steps_mrn):
                break
        st.result.epoch_losses.append(float(np.mean(epoch_losses)))
        if out_dir is not None:
            save_checkpoint(model, Path(out_dir) / "mrn.mkpt")
        if st.done(cfg.max_steps_mrn) or _plateau(st.result.epoch_losses, cfg.patience, cfg.min_delta):
            break
    if (param_digest(mpn), param_digest(qun)) != digests:
        raise RuntimeError("frozen MPN/QUN parameters changed during MRN training")
    _frozen(model)
    st.result.final_loss = st.result.epoch_losses[-1]
    return st.result


def train_all(manifest, cfg: TrainConfig, out_dir=None, spec: DegradeSpec | None = None,
              stages=("mpn", "qun", "mrn"), log_path=None) -> tuple[ModelBundle | None, dict]:
    """Run the requested stages in order.

    Stages not requested are loaded from ``out_dir`` checkpoints. Returns
    the bundle (when all three networks exist) and the per-stage results.
    """
    from .nets import load_checkpoint

    samples = load_samples(manifest, split="train")
    if not samples:
        raise DataError("manifest has no training records")
    rng = Rng(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    results = {}
    nets = {}
    try:
        for name in ORDER:
            if name in stages:
                if name == "mpn":
                    res = train_mpn(samples, cfg, rng, out, log_fh)
                elif name == "qun":
                    res = train_qun(samples, nets["mpn"], cfg, spec, rng, out, log_fh)
                else:
                    res = train_mrn(samples, nets["mpn"], nets["qun"], cfg, rng, out, log_fh)
                results[name] = res
                nets[name] = res.params
                log.info("%s: %d steps, final loss %.5f", name, res.steps, res.final_loss)
            elif out is not None and (out / f"{name}.mkpt").is_file():
                nets[name] = load_checkpoint(out / f"{name}.mkpt", net=name, config=cfg.net_config(name))
            elif any(s in stages for s in ORDER[ORDER.index(name) + 1:]):
                raise DataError(f"stage {name} is needed by a later stage but {out}/{name}.mkpt is missing")
    finally:
        if log_fh:
            log_fh.close()
    bundle = None
    if len(nets) == 3:
        bundle = ModelBundle(nets["mpn"], nets["qun"], nets["mrn"])
        if out is not None:
            bundle.save(out)
    return bundle, results
