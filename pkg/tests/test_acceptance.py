"""Acceptance criteria, one test per criterion.

Each test appends a PASS/FAIL line (with the measured value) that is
printed in the terminal summary, then asserts.
"""
import time

import numpy as np
import pytest
from PIL import Image as PILImage

from coarsematte import synthdata
from coarsematte.cli import main
from coarsematte.degrade import DegradeSpec, binarize, degrade, dilate, erode
from coarsematte.imagery import Rng, load_image, load_matte, resize, save_image
from coarsematte.losses import mpn_loss, mrn_loss, qun_consistency_loss, qun_identity_loss, qun_loss
from coarsematte.metrics import connectivity_error, gradient_error, mse, sad
from coarsematte.nets import init_params, qun_forward
from coarsematte.pipeline import refine_external_mask
from coarsematte.train import Sample, TrainConfig, train_mpn, train_mrn, train_qun
from conftest import ACCEPTANCE_LINES
from gradcheck import max_relative_error
from oracles import (composite_loop, connectivity_error_loop, gradient_error_loop, l1_loop, mse_loop,
                     sad_loop)


def record(number, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _samples(n_fine, size, seed, n_bg=None):
    r = Rng(seed)
    fgs = synthdata.procedural_foregrounds(n_fine, 0, size, r.split("fg"))
    bgs = synthdata.procedural_backgrounds(n_bg or n_fine, size, r.split("bg"))
    return [Sample(s.id, synthdata.composite(s.fg, s.alpha, bgs[i % len(bgs)]), s.alpha, s.fg, s.quality)
            for i, s in enumerate(fgs)]


def test_criterion_1_compositing_exactness():
    t0 = time.perf_counter()
    r = np.random.default_rng(1)
    bad = 0
    worst = 0.0
    for _ in range(100):
        fg, bg = r.uniform(size=(2, 32, 32, 3))
        a = r.uniform(size=(32, 32))
        bad += not np.array_equal(synthdata.composite(fg, np.ones((32, 32)), bg), fg)
        bad += not np.array_equal(synthdata.composite(fg, np.zeros((32, 32)), bg), bg)
        total = synthdata.composite(fg, a, bg) + synthdata.composite(fg, 1 - a, bg)
        worst = max(worst, np.abs(total - (fg + bg)).max())
    # one independent loop-oracle spot check
    worst = max(worst, np.abs(synthdata.composite(fg, a, bg) - composite_loop(fg, a, bg)).max())
    dt = time.perf_counter() - t0
    record(1, "compositing identities and affinity", bad == 0 and worst <= 1e-6 and dt < 1.0,
           f"identity failures {bad}, max affinity error {worst:.2e}, {dt:.2f}s")


def test_criterion_2_loss_arithmetic():
    errs = []
    ones, zeros = np.ones((4, 4)), np.zeros((4, 4))
    errs.append(abs(float(mpn_loss(np.stack([ones, zeros], -1), zeros, ones)) - 1.0))
    errs.append(abs(float(mpn_loss(np.stack([[0.8, 0.2], [0.2, 0.8]], -1)[None],
                                   np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))) - 0.2))
    half = np.full((4, 4), 0.5)
    errs.append(abs(float(qun_identity_loss(half, zeros, half, ones)) - 1.0))
    r = np.random.default_rng(2)
    x, x2 = r.uniform(size=(2, 8, 8))
    mid = (x + x2) / 2
    errs.append(abs(float(qun_loss(mid, x, mid, x2)) - 0.25 * np.abs(x - x2).mean()))
    errs.append(abs(float(qun_consistency_loss(mid, mid))))
    rgb, alpha = np.full((5, 5, 3), 0.4), np.full((5, 5), 0.3)
    errs.append(abs(float(mrn_loss(np.concatenate([rgb, (alpha + 0.1)[..., None]], -1), rgb, alpha)) - 0.05))
    errs.append(abs(float(mrn_loss(np.concatenate([rgb + 0.2, alpha[..., None]], -1), rgb, alpha)) - 0.1))
    hand = max(errs)

    loop_errs = []
    for _ in range(20):
        p2, p4 = r.uniform(size=(6, 7, 2)), r.uniform(size=(6, 7, 4))
        fg, bg, qa, qb, ma, mb, a = r.uniform(size=(7, 6, 7))
        c = r.uniform(size=(6, 7, 3))
        loop_errs += [
            abs(float(mpn_loss(p2, fg, bg)) - (0.5 * l1_loop(p2[..., 0], fg) + 0.5 * l1_loop(p2[..., 1], bg))),
            abs(float(qun_identity_loss(qa, ma, qb, mb)) - (l1_loop(qa, ma) + l1_loop(qb, mb))),
            abs(float(qun_consistency_loss(qa, qb)) - l1_loop(qa, qb)),
            abs(float(qun_loss(qa, ma, qb, mb))
                - (0.25 * (l1_loop(qa, ma) + l1_loop(qb, mb)) + 0.5 * l1_loop(qa, qb))),
            abs(float(mrn_loss(p4, c, a)) - (0.5 * l1_loop(p4[..., :3], c) + 0.5 * l1_loop(p4[..., 3], a))),
        ]
    loops = max(loop_errs)
    record(2, "loss arithmetic", hand <= 1e-9 and loops <= 1e-9,
           f"max hand-value error {hand:.1e}, max loop-oracle error {loops:.1e}")


def test_criterion_3_gradient_checks():
    t0 = time.perf_counter()
    worst, checked = 0.0, 0
    for net in ("mpn", "qun", "mrn"):
        for point in range(20):
            err, ok, _ = max_relative_error(net, point)
            worst = max(worst, err)
            checked += ok
    dt = time.perf_counter() - t0
    record(3, "finite-difference gradient checks", worst < 1e-3 and checked == 3 * 20 * 16 and dt < 120,
           f"max relative error {worst:.2e} over {checked} coordinates, {dt:.0f}s")


def test_criterion_4_metric_oracles():
    t0 = time.perf_counter()
    r = np.random.default_rng(4)
    worst = dict.fromkeys(("sad", "mse", "grad", "conn"), 0.0)
    for i in range(50):
        p, g = r.uniform(size=(2, 16, 16))
        if i % 2:
            # overlapping opaque cores, so the connectivity region is non-empty
            g[2:11, 3:12] = 1.0
            p[4:13, 2:10] = 1.0
        worst["sad"] = max(worst["sad"], abs(sad(p, g) - sad_loop(p, g)))
        worst["mse"] = max(worst["mse"], abs(mse(p, g) - mse_loop(p, g)))
        worst["grad"] = max(worst["grad"], abs(gradient_error(p, g) - gradient_error_loop(p, g)))
        worst["conn"] = max(worst["conn"], abs(connectivity_error(p, g) - connectivity_error_loop(p, g)))
    dt = time.perf_counter() - t0
    record(4, "metric oracles", max(worst.values()) <= 1e-9 and dt < 60,
           ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {dt:.1f}s")


def test_criterion_5_degradation_properties():
    r = np.random.default_rng(5)
    violations = 0
    for i in range(200):
        m = r.uniform(size=tuple(r.integers(1, 24, size=2)))
        if i % 3 == 0:
            m = np.round(m)
        out = degrade(m, DegradeSpec(), Rng(i))
        violations += out.shape != m.shape or out.min() < 0 or out.max() > 1
        radius = int(r.integers(1, 4))
        violations += not (np.all(dilate(m, radius) >= m) and np.all(m >= erode(m, radius)))
        t = float(r.uniform(0.05, 0.95))
        violations += not np.array_equal(binarize(binarize(m, t), t), binarize(m, t))
        violations += not np.array_equal(degrade(m, DegradeSpec.disabled(), Rng(i)), m)
    record(5, "degradation properties", violations == 0, f"{violations} violations in 4 x 200 trials")


def _overfit_once(samples):
    cfg = TrainConfig(low_res=(48, 40), crop=(128, 128), mpn_width=8, mpn_depth=2, qun_width=8, qun_depth=2,
                      mrn_width=8, mrn_depth=2, batch_mpn=8, mpn_epochs=10 ** 6, max_steps_mpn=500, seed=0)
    mpn = train_mpn(samples, cfg)
    cfg = TrainConfig(low_res=(32, 32), crop=(128, 128), mpn_width=8, mpn_depth=2, qun_width=8, qun_depth=2,
                      mrn_width=8, mrn_depth=2, mrn_epochs=10 ** 6, max_steps_mrn=1000, patience=0, seed=0)
    frozen_mpn = init_params(cfg.net_config("mpn"), "mpn", Rng(0))
    frozen_qun = init_params(cfg.net_config("qun"), "qun", Rng(0), zero_head=True)
    mrn = train_mrn(samples, frozen_mpn, frozen_qun, cfg)
    return mpn, mrn


@pytest.mark.slow
def test_criterion_6_overfit_sanity():
    t0 = time.perf_counter()
    samples = _samples(8, (128, 128), seed=1)
    mpn, mrn = _overfit_once(samples)
    mpn2, mrn2 = _overfit_once(samples)
    dt = time.perf_counter() - t0
    same = mpn.losses == mpn2.losses and mrn.losses == mrn2.losses and mpn.final_loss == mpn2.final_loss
    ok = (mpn.final_loss < 0.05 and mpn.steps <= 500 and mrn.final_loss < 0.05 and mrn.steps <= 1000
          and same and dt < 600)
    record(6, "overfit sanity", ok,
           f"MPN {mpn.final_loss:.4f} after {mpn.steps} steps, MRN {mrn.final_loss:.4f} after {mrn.steps} steps, "
           f"rerun identical {same}, {dt:.0f}s for both runs")


@pytest.mark.slow
def test_criterion_7_quality_unification():
    t0 = time.perf_counter()
    ratios = []
    spec = DegradeSpec()
    for seed in range(3):
        train = _samples(64, (128, 128), seed=seed, n_bg=16)
        test = _samples(16, (128, 128), seed=100 + seed, n_bg=16)
        cfg = TrainConfig(low_res=(32, 32), crop=(128, 128), mpn_width=8, mpn_depth=2, qun_width=8, qun_depth=2,
                          mrn_width=8, mrn_depth=2, qun_epochs=100, patience=0, seed=seed, qun_source="gt")
        mpn = init_params(cfg.net_config("mpn"), "mpn", Rng(0))
        qun = train_qun(train, mpn, cfg).params
        gap, unified = [], []
        for i, s in enumerate(test):
            img, fine = resize(s.image, 32, 32), resize(s.alpha, 32, 32)
            coarse = degrade(fine, spec, Rng(7).split(seed, i))
            gap.append(np.abs(fine - coarse).mean())
            unified.append(np.abs(qun_forward(qun, img, fine) - qun_forward(qun, img, coarse)).mean())
        ratios.append(np.mean(unified) / np.mean(gap))
    dt = time.perf_counter() - t0
    med = float(np.median(ratios))
    record(7, "quality unification", med <= 0.5 and dt < 600,
           f"median held-out ratio {med:.3f} (seeds: {', '.join(f'{x:.3f}' for x in ratios)}), {dt:.0f}s")


@pytest.mark.slow
def test_criterion_8_refinement_application(desk_dataset, desk_models):
    bundle = desk_models[0]
    records = desk_dataset.select(split="test").records
    wins, gains = 0, []
    for rec in records:
        img, _ = load_image(desk_dataset.resolve(rec.composite_path))
        gt = load_matte(desk_dataset.resolve(rec.alpha_path))
        coarse = dilate(binarize(gt, 0.5), 2)
        refined = refine_external_mask(img, coarse, bundle).alpha
        before, after = sad(coarse, gt), sad(refined, gt)
        wins += after < before
        gains.append(before - after)
    frac = wins / len(records)
    record(8, "refinement of binarized+dilated masks", len(records) == 25 and frac >= 0.8,
           f"{wins}/{len(records)} images improved, median SAD gain {np.median(gains):.4f}")


@pytest.mark.slow
def test_criterion_9_cli_smoke(tmp_path, capsys):
    data, models, out = tmp_path / "data", tmp_path / "models", tmp_path / "out"
    codes = {}
    codes["synth"] = main(["synth", "--procedural", "16", "8", "4", "--size", "128,128", "--n-bg", "8",
                           "--k", "1", "--out", str(data), "--seed", "1"])
    cfg = tmp_path / "desk.tsv"
    cfg.write_text("\n".join([
        "low_res\t32,32", "crop\t128,128", "grid_min\t64",
        "mpn_width\t8", "mpn_depth\t2", "qun_width\t8", "qun_depth\t2", "mrn_width\t8", "mrn_depth\t2",
        "max_steps_mpn\t30", "max_steps_qun\t20", "max_steps_mrn\t30",
    ]) + "\n")
    codes["train"] = main(["train", "--manifest", str(data / "manifest.tsv"), "--stage", "all",
                           "--config", str(cfg), "--out", str(models)])
    codes["eval"] = main(["eval", "--manifest", str(data / "manifest.tsv"), "--models", str(models),
                          "--report", str(tmp_path / "report.tsv")])
    big = Rng(9).uniform(size=(800, 800, 3))
    save_image(big, tmp_path / "portrait.png")
    save_image(Rng(10).uniform(size=(800, 800, 3)), tmp_path / "bg.png")
    codes["infer"] = main(["infer", "--image", str(tmp_path / "portrait.png"), "--models", str(models),
                           "--out", str(out), "--bg", str(tmp_path / "bg.png")])
    mask = np.zeros((800, 800))
    mask[200:700, 250:550] = 1
    save_image(mask, tmp_path / "mask.png")
    codes["refine"] = main(["refine", "--image", str(tmp_path / "portrait.png"), "--mask", str(tmp_path / "mask.png"),
                            "--models", str(models), "--out", str(out / "refined")])
    alpha = load_matte(out / "portrait_alpha.png")
    with PILImage.open(out / "portrait_alpha.png") as im:
        size = im.size
    ok = (all(c == 0 for c in codes.values()) and alpha.shape == (800, 800) and size == (800, 800)
          and 0 <= alpha.min() and alpha.max() <= 1 and (out / "portrait_composite.png").is_file()
          and (out / "refined" / "portrait_alpha.png").is_file() and (tmp_path / "report.tsv").is_file())
    record(9, "end-to-end CLI", ok,
           " ".join(f"{k}={v}" for k, v in codes.items()) + f", infer alpha {alpha.shape[0]}x{alpha.shape[1]}")
