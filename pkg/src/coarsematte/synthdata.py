"""Alpha compositing, dataset manifests and procedural training data."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .degrade import DegradeSpec, degrade
from .errors import DataError, ManifestError
from .imagery import Quality, Rng, as_image, as_matte, resize, save_image

log = logging.getLogger(__name__)

MANIFEST_HEADER = "# coarsematte-manifest v1"
SPLITS = ("train", "test")


def composite(fg, alpha, bg) -> np.ndarray:
    """I = alpha * F + (1 - alpha) * B, per pixel and channel."""
    fg, bg, alpha = as_image(fg), as_image(bg), as_matte(alpha)
    if fg.shape != bg.shape or fg.shape[:2] != alpha.shape:
        raise ValueError(
            f"shape mismatch: fg {fg.shape}, alpha {alpha.shape}, bg {bg.shape}"
        )
    a = alpha[:, :, None]
    return a * fg + (1.0 - a) * bg


@dataclass
class ForegroundSample:
    fg: np.ndarray
    alpha: np.ndarray
    quality: Quality
    id: str
    split: str = "train"

    def __post_init__(self):
        self.quality = Quality(self.quality)
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.fg.shape[:2] != self.alpha.shape:
            raise ValueError(f"{self.id}: fg {self.fg.shape} and alpha {self.alpha.shape} differ in size")


@dataclass(frozen=True)
class ManifestRecord:
    composite_path: str
    alpha_path: str
    fg_path: str
    bg_path: str
    quality: Quality
    split: str

    @property
    def id(self) -> str:
        return Path(self.composite_path).stem


FIELDS = tuple(f.name for f in fields(ManifestRecord))


@dataclass
class DatasetManifest:
    records: list
    root: Path = Path(".")

    def __len__(self):
        return len(self.records)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.root / p

    def select(self, split=None, quality=None) -> "DatasetManifest":
        recs = [
            r for r in self.records
            if (split is None or r.split == split)
            and (quality is None or r.quality == Quality(quality))
        ]
        return DatasetManifest(recs, self.root)


def save_manifest(m: DatasetManifest, path) -> None:
    path = Path(path)
    lines = [MANIFEST_HEADER, "# " + "\t".join(FIELDS)]
    for r in m.records:
        values = [str(getattr(r, f).value if f == "quality" else getattr(r, f)) for f in FIELDS]
        for v in values:
            if "\t" in v or "\n" in v:
                raise ManifestError(f"field value {v!r} contains a tab or newline")
        lines.append("\t".join(values))
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: cannot write manifest ({exc})") from exc


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse a manifest; relative paths are taken relative to its directory."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"{path}: no such manifest")
    text = path.read_text(encoding="utf-8").splitlines()
    if not text or text[0].strip() != MANIFEST_HEADER:
        raise ManifestError(f"{path}: missing header {MANIFEST_HEADER!r}", line=1)
    m = DatasetManifest([], path.parent)
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != len(FIELDS):
            missing = FIELDS[len(parts):] if len(parts) < len(FIELDS) else ()
            detail = f" (missing {', '.join(missing)})" if missing else " (unknown extra fields)"
            raise ManifestError(f"expected {len(FIELDS)} fields, got {len(parts)}{detail}", line=lineno)
        values = dict(zip(FIELDS, parts))
        try:
            values["quality"] = Quality(values["quality"])
        except ValueError:
            raise ManifestError(f"bad quality {values['quality']!r}", line=lineno) from None
        if values["split"] not in SPLITS:
            raise ManifestError(f"bad split {values['split']!r}", line=lineno)
        rec = ManifestRecord(**values)
        if check_files:
            for f in ("composite_path", "alpha_path", "fg_path", "bg_path"):
                if not m.resolve(getattr(rec, f)).is_file():
                    raise ManifestError(f"missing file {getattr(rec, f)}", line=lineno)
        m.records.append(rec)
    return m


def sample_backgrounds(n_bg: int, k: int, rng: Rng) -> list[int]:
    """k background indices, without replacement while the pool lasts."""
    picks = []
    while len(picks) < k:
        perm = rng.permutation(n_bg)
        picks.extend(int(i) for i in perm[: k - len(picks)])
    return picks


def build_dataset(foregrounds, backgrounds, k: int, rng: Rng, out_dir,
                  manifest_name: str = "manifest.tsv", workers: int = 1) -> DatasetManifest:
    """Composite every foreground onto ``k`` sampled backgrounds.

    Writes ``{composite,alpha,fg}/<id>_<slot>.png`` and ``bg/bg_<j>.png``
    under ``out_dir`` plus the manifest, and returns the manifest. Each
    background is bilinearly resized to the foreground's size.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not foregrounds:
        raise DataError("no foregrounds given")
    if not backgrounds:
        raise DataError("no backgrounds given")
    ids = [s.id for s in foregrounds]
    if len(set(ids)) != len(ids):
        raise DataError("foreground ids must be unique")

    out = Path(out_dir)
    for sub in ("composite", "alpha", "fg", "bg"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    bg_paths = []
    for j, bg in enumerate(backgrounds):
        p = f"bg/bg_{j:04d}.png"
        save_image(as_image(bg), out / p)
        bg_paths.append(p)

    def make(sample: ForegroundSample):
        recs = []
        picks = sample_backgrounds(len(backgrounds), k, rng.split("bg", sample.id))
        h, w = sample.alpha.shape
        for slot, j in enumerate(picks):
            name = f"{sample.id}_{slot}.png"
            bg = resize(backgrounds[j], h, w)
            save_image(composite(sample.fg, sample.alpha, bg), out / "composite" / name)
            save_image(sample.alpha, out / "alpha" / name)
            save_image(sample.fg, out / "fg" / name)
            recs.append(ManifestRecord(
                f"composite/{name}", f"alpha/{name}", f"fg/{name}", bg_paths[j],
                sample.quality, sample.split,
            ))
        return recs

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(make, foregrounds))
    else:
        chunks = [make(s) for s in foregrounds]
    m = DatasetManifest([r for c in chunks for r in c], out)
    save_manifest(m, out / manifest_name)
    log.info("wrote %d records to %s", len(m), out / manifest_name)
    return m


# ---------------------------------------------------------------------------
# Procedural data
# ---------------------------------------------------------------------------

def _smooth_field(h, w, rng: Rng, cells=4):
    coarse = rng.uniform(size=(cells, cells))
    return resize(coarse, h, w)


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros(np.broadcast(h, s, v).shape + (3,))
    for k, (r, g, b) in enumerate(table):
        sel = i == k
        for c, ch in enumerate((r, g, b)):
            out[..., c] = np.where(sel, ch, out[..., c])
    return out


def _segment_distance(yy, xx, p0, p1):
    d = p1 - p0
    L2 = float(d @ d) or 1e-12
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / L2, 0.0, 1.0)
    return np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))


def procedural_alpha(h: int, w: int, rng: Rng, n_strands: int | None = None) -> np.ndarray:
    """A soft-edged head-and-shoulders blob with thin semi-transparent strands."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    s = min(h, w)
    cx = w * rng.uniform(0.4, 0.6)
    head_c = np.array([h * rng.uniform(0.3, 0.42), cx])
    head_r = np.array([s * rng.uniform(0.14, 0.19), s * rng.uniform(0.12, 0.16)])
    torso_c = np.array([h * rng.uniform(0.85, 0.95), cx + w * rng.uniform(-0.05, 0.05)])
    torso_r = np.array([h * rng.uniform(0.3, 0.4), w * rng.uniform(0.28, 0.4)])

    def ellipse_sd(c, r):
        rho = np.hypot((yy - c[0]) / r[0], (xx - c[1]) / r[1])
        return (rho - 1.0) * min(r)

    sd = np.minimum(ellipse_sd(head_c, head_r), ellipse_sd(torso_c, torso_r))
    edge = rng.uniform(0.8, 2.0)
    alpha = np.clip(0.5 - sd / edge, 0.0, 1.0)

    n = int(rng.integers(8, 16)) if n_strands is None else n_strands
    for _ in range(n):
        theta = rng.uniform(-np.pi * 0.95, -np.pi * 0.05)  # upper half of the head
        pos = head_c + head_r * np.array([np.sin(theta), np.cos(theta)]) * 0.9
        heading = theta + rng.normal(0, 0.3)
        length = s * rng.uniform(0.08, 0.2)
        n_seg = 6
        width = rng.uniform(0.6, 1.2)
        opacity = rng.uniform(0.35, 0.9)
        for _ in range(n_seg):
            nxt = pos + (length / n_seg) * np.array([np.sin(heading), np.cos(heading)])
            dist = _segment_distance(yy, xx, pos, nxt)
            alpha = np.maximum(alpha, opacity * np.clip(1.0 - dist / width, 0.0, 1.0))
            pos = nxt
            heading += rng.normal(0, 0.25)
    return np.clip(alpha, 0.0, 1.0)


def procedural_foreground_rgb(h: int, w: int, rng: Rng) -> np.ndarray:
    """Warm, smoothly varying colors with a stripe texture."""
    hue = (rng.uniform(0.0, 0.12) + 0.05 * (_smooth_field(h, w, rng) - 0.5)) % 1.0
    sat = 0.55 + 0.35 * _smooth_field(h, w, rng)
    yy, xx = np.mgrid[0:h, 0:w]
    freq = rng.uniform(0.3, 0.6)
    stripes = 0.5 + 0.5 * np.sin(freq * (xx + 0.5 * yy) + rng.uniform(0, 2 * np.pi))
    val = 0.55 + 0.3 * _smooth_field(h, w, rng) + 0.12 * stripes
    return np.clip(_hsv_to_rgb(hue, sat, np.clip(val, 0, 1)), 0.0, 1.0)


def procedural_background(h: int, w: int, rng: Rng) -> np.ndarray:
    """Cool-hued, low-saturation texture: smooth gradient plus fine noise."""
    hue = (rng.uniform(0.45, 0.7) + 0.08 * (_smooth_field(h, w, rng, cells=3) - 0.5)) % 1.0
    sat = 0.15 + 0.3 * _smooth_field(h, w, rng, cells=5)
    val = 0.25 + 0.5 * _smooth_field(h, w, rng, cells=6) + rng.normal(0, 0.04, size=(h, w))
    return np.clip(_hsv_to_rgb(hue, sat, np.clip(val, 0, 1)), 0.0, 1.0)


COARSE_SPEC = DegradeSpec(p_binarize=1.0, p_morph=1.0, p_blur=0.0, morph_radius_range=(1, 3))


def procedural_foregrounds(n_fine: int, n_coarse: int, size: tuple, rng: Rng,
                           n_test: int = 0) -> list[ForegroundSample]:
    """Generate fine and coarse procedural samples plus ``n_test`` fine test samples.

    Coarse samples carry a binarized, dilated or eroded copy of their
    true matte as annotation, the way a hand-drawn polygon mask would.
    """
    h, w = size
    out = []
    plan = [("fine", "train")] * n_fine + [("coarse", "train")] * n_coarse + [("fine", "test")] * n_test
    for i, (quality, split) in enumerate(plan):
        r = rng.split("fg", i)
        alpha = procedural_alpha(h, w, r.split("alpha"))
        fg = procedural_foreground_rgb(h, w, r.split("rgb"))
        if quality == "coarse":
            alpha = degrade(alpha, COARSE_SPEC, r.split("coarse"))
        out.append(ForegroundSample(fg, alpha, Quality(quality), f"{split}{i:05d}", split))
    return out


def procedural_backgrounds(n: int, size: tuple, rng: Rng) -> list[np.ndarray]:
    return [procedural_background(size[0], size[1], rng.split("bgimg", j)) for j in range(n)]
