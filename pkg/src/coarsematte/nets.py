"""Mask prediction, quality unification and matting refinement networks.

All three share a U-shaped encoder/decoder: 3x3 convolutions with group
normalization and ReLU, stride-2 convolutions going down, bilinear 2x
upsampling plus concatenated skips coming up, and a 1x1 head with a
sigmoid. Modules take and return NCHW tensors; the ``*_forward`` helpers
take HWC numpy arrays.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import CheckpointError
from .imagery import Rng, as_image, as_matte

NETS = ("mpn", "qun", "mrn")
MAGIC = b"MKPT1"
# QUN skip: logit of the input mask, clamped so it stays finite on binary masks
SKIP_EPS = 0.01


@dataclass(frozen=True)
class NetConfig:
    base_width: int = 32
    depth: int = 4
    low_res: tuple = (192, 160)
    high_res: tuple = (768, 640)
    scale_gap: int = 4
    grid_range: tuple = (256, 1024)

    def __post_init__(self):
        object.__setattr__(self, "low_res", tuple(int(v) for v in self.low_res))
        object.__setattr__(self, "high_res", tuple(int(v) for v in self.high_res))
        object.__setattr__(self, "grid_range", tuple(int(v) for v in self.grid_range))
        if self.base_width < 4:
            raise ValueError("base_width must be >= 4")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.scale_gap != 4:
            raise ValueError("scale_gap is fixed at 4")
        if self.high_res != tuple(self.scale_gap * v for v in self.low_res):
            raise ValueError(f"high_res {self.high_res} must be 4 x low_res {self.low_res}")
        lo, hi = self.grid_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad grid_range {self.grid_range}")

    def widths(self):
        return [self.base_width * 2 ** level for level in range(self.depth + 1)]


DEFAULT_SHAPES = {"mpn": (32, 4), "qun": (16, 3), "mrn": (32, 4)}


def default_config(net: str, **overrides) -> NetConfig:
    width, depth = DEFAULT_SHAPES[net]
    return NetConfig(**{"base_width": width, "depth": depth, **overrides})


def _groups(c):
    return math.gcd(c, 4)


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.GroupNorm(_groups(cout), cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.GroupNorm(_groups(cout), cout),
            nn.ReLU(inplace=True),
        )


class Down(nn.Module):
    def __init__(self, cin, cout, extra=0):
        super().__init__()
        self.reduce = nn.Sequential(
            nn.Conv2d(cin, cout, 3, stride=2, padding=1),
            nn.GroupNorm(_groups(cout), cout),
            nn.ReLU(inplace=True),
        )
        self.block = ConvBlock(cout + extra, cout)

    def forward(self, x, inject=None):
        x = self.reduce(x)
        if inject is not None:
            x = torch.cat([x, inject], dim=1)
        return self.block(x)


class Up(nn.Module):
    def __init__(self, cin, cskip):
        super().__init__()
        self.block = ConvBlock(cin + cskip, cskip)

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return self.block(torch.cat([x, skip], dim=1))


class UNet(nn.Module):
    """Encoder/decoder with concatenation skips at every scale.

    If ``inject_level`` is set, an external feature map with
    ``inject_channels`` channels is concatenated to the encoder features
    at that level (resolution 1 / 2**inject_level).
    """

    def __init__(self, in_ch, out_ch, width, depth, inject_channels=0, inject_level=None):
        super().__init__()
        c = [width * 2 ** i for i in range(depth + 1)]
        self.depth = depth
        self.inject_level = inject_level
        self.stem = ConvBlock(in_ch, c[0])
        self.downs = nn.ModuleList(
            Down(c[i - 1], c[i], inject_channels if i == inject_level else 0)
            for i in range(1, depth + 1)
        )
        self.ups = nn.ModuleList(Up(c[i], c[i - 1]) for i in range(depth, 0, -1))
        self.head = nn.Conv2d(c[0], out_ch, 1)

    def forward(self, x, inject=None):
        skips = [self.stem(x)]
        for level, down in enumerate(self.downs, start=1):
            skips.append(down(skips[-1], inject if level == self.inject_level else None))
        y = skips.pop()
        for up in self.ups:
            y = up(y, skips.pop())
        return self.head(y)


def _check_divisible(h, w, depth, what="input"):
    m = 2 ** depth
    if h % m or w % m:
        raise ValueError(f"{what} size {h}x{w} must be divisible by {m} for depth {depth}")


class MaskPredictionNet(nn.Module):
    """Image -> (foreground mask, background mask)."""

    net_id = "mpn"

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        self.body = UNet(3, 2, config.base_width, config.depth)

    def forward(self, img):
        _check_divisible(*img.shape[-2:], self.config.depth)
        return torch.sigmoid(self.body(img))


class QualityUnificationNet(nn.Module):
    """(image, mask) -> unified mask.

    The input mask's logit is added to the head output, so a zero head
    reproduces (a clamped copy of) the input mask.
    """

    net_id = "qun"

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        self.body = UNet(4, 1, config.base_width, config.depth)

    def logits(self, img, mask):
        if img.shape[-2:] != mask.shape[-2:]:
            raise ValueError(f"image {tuple(img.shape[-2:])} and mask {tuple(mask.shape[-2:])} sizes differ")
        _check_divisible(*img.shape[-2:], self.config.depth)
        m = mask.clamp(SKIP_EPS, 1.0 - SKIP_EPS)
        return self.body(torch.cat([img, mask], dim=1)) + torch.log(m) - torch.log1p(-m)

    def forward(self, img, mask):
        return torch.sigmoid(self.logits(img, mask))


class MattingRefinementNet(nn.Module):
    """(full-res image, quarter-res mask) -> (foreground RGB, alpha)."""

    net_id = "mrn"

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        # the mask joins the encoder at the 1/4 scale, i.e. level 2
        self.body = UNet(3, 4, config.base_width, config.depth, inject_channels=1, inject_level=2)

    def forward(self, img, mask):
        h, w = img.shape[-2:]
        gap = self.config.scale_gap
        if h % gap or w % gap or tuple(mask.shape[-2:]) != (h // gap, w // gap):
            raise ValueError(
                f"mask size {tuple(mask.shape[-2:])} must be image size {(h, w)} divided by {gap}"
            )
        _check_divisible(h, w, self.config.depth)
        return torch.sigmoid(self.body(img, mask))


NET_CLASSES = {"mpn": MaskPredictionNet, "qun": QualityUnificationNet, "mrn": MattingRefinementNet}


def init_params(config: NetConfig, net: str, rng: Rng, zero_head: bool = False) -> nn.Module:
    """Build a network with He-normal convolution weights drawn from ``rng``.

    Biases start at zero and normalization scales at one. With
    ``zero_head`` the final 1x1 convolution is all zeros.
    """
    if net not in NET_CLASSES:
        raise ValueError(f"unknown net {net!r}; expected one of {NETS}")
    model = NET_CLASSES[net](config)
    with torch.no_grad():
        for name, mod in model.named_modules():
            if isinstance(mod, nn.Conv2d):
                fan_in = mod.in_channels * mod.kernel_size[0] * mod.kernel_size[1]
                draw = rng.split(name).normal(0.0, math.sqrt(2.0 / fan_in), size=tuple(mod.weight.shape))
                mod.weight.copy_(torch.from_numpy(draw))
                mod.bias.zero_()
            elif isinstance(mod, nn.GroupNorm):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
        if zero_head:
            model.body.head.weight.zero_()
            model.body.head.bias.zero_()
    return model


def param_count(config: NetConfig, net: str) -> int:
    """Number of trainable scalars, computed from the configuration alone."""
    in_ch, out_ch, inject = {"mpn": (3, 2, 0), "qun": (4, 1, 0), "mrn": (3, 4, 1)}[net]
    c = config.widths()

    def conv(cin, cout, k=3):
        return k * k * cin * cout + cout

    def block(cin, cout):
        return conv(cin, cout) + conv(cout, cout) + 4 * cout

    total = block(in_ch, c[0])
    for i in range(1, config.depth + 1):
        extra = inject if i == 2 else 0
        total += conv(c[i - 1], c[i]) + 2 * c[i] + block(c[i] + extra, c[i])
        total += block(c[i] + c[i - 1], c[i - 1])
    return total + conv(c[0], out_ch, k=1)


def param_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# numpy-level forward helpers
# ---------------------------------------------------------------------------

def _dtype(model):
    return next(model.parameters()).dtype


def image_tensor(img, dtype=torch.float32):
    return torch.from_numpy(np.ascontiguousarray(as_image(img).transpose(2, 0, 1))).to(dtype)[None]


def matte_tensor(m, dtype=torch.float32):
    return torch.from_numpy(np.ascontiguousarray(as_matte(m))).to(dtype)[None, None]


def _to_hwc(t):
    return t[0].permute(1, 2, 0).detach().cpu().numpy().astype(np.float64)


@torch.no_grad()
def mpn_forward(model: MaskPredictionNet, img) -> np.ndarray:
    """(H, W, 3) image -> (H, W, 2): foreground mask, background mask."""
    return _to_hwc(model(image_tensor(img, _dtype(model))))


@torch.no_grad()
def qun_forward(model: QualityUnificationNet, img, mask) -> np.ndarray:
    """(H, W, 3) image and (H, W) mask -> (H, W) unified mask."""
    dt = _dtype(model)
    return _to_hwc(model(image_tensor(img, dt), matte_tensor(mask, dt)))[:, :, 0]


@torch.no_grad()
def mrn_forward(model: MattingRefinementNet, img, mask) -> np.ndarray:
    """(H, W, 3) image and (H/4, W/4) mask -> (H, W, 4): RGB foreground, alpha."""
    dt = _dtype(model)
    return _to_hwc(model(image_tensor(img, dt), matte_tensor(mask, dt)))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
# Layout (little-endian):
#   b"MKPT1" | u32 header length | UTF-8 JSON {"net", "config"} | u32 array count
#   per array: u16 name length | name | u8 ndim | u32 dims... | float32 data

def save_checkpoint(model: nn.Module, path) -> None:
    header = json.dumps({"net": model.net_id, "config": asdict(model.config)}, sort_keys=True).encode()
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(state)))
        for name, t in state.items():
            raw = name.encode()
            arr = t.detach().cpu().numpy().astype("<f4")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path, net: str | None = None, config: NetConfig | None = None) -> nn.Module:
    """Load a checkpoint, rejecting a different net id or configuration."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: no such checkpoint")
    data = path.read_bytes()
    if data[:5] != MAGIC:
        raise CheckpointError(f"{path}: not an MKPT1 checkpoint")
    try:
        pos = 5
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        header = json.loads(data[pos:pos + n])
        pos += n
        stored = NetConfig(**header["config"])
        if net is not None and header["net"] != net:
            raise CheckpointError(f"{path}: holds {header['net']!r}, expected {net!r}")
        if config is not None and stored != config:
            raise CheckpointError(f"{path}: config {stored} does not match {config}")
        model = NET_CLASSES[header["net"]](stored)
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        state = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + ln].decode()
            pos += ln
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            state[name] = torch.from_numpy(arr.astype(np.float32))
        model.load_state_dict(state, strict=True)
    except CheckpointError:
        raise
    except (struct.error, ValueError, KeyError, TypeError, RuntimeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return model
