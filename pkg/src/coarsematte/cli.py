"""Command line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .degrade import DegradeSpec, degrade
from . import synthdata
from .errors import DataError, NumericalError
from .imagery import Quality, Rng, load_image, load_matte, save_image

log = logging.getLogger("coarsematte")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _size(text):
    try:
        h, w = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected H,W, got {text!r}") from None
    return h, w


def _images_in(d) -> list[Path]:
    d = Path(d)
    if not d.is_dir():
        raise DataError(f"{d}: not a directory")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"{d}: no images found")
    return files


def _foregrounds_from_dir(d, quality, split):
    out = []
    for p in _images_in(d):
        rgb, alpha = load_image(p)
        if alpha is None:
            raise DataError(f"{p}: foreground needs an alpha channel (RGBA PNG)")
        out.append(synthdata.ForegroundSample(rgb, alpha, Quality(quality), f"{split}_{p.stem}", split))
    return out


def cmd_synth(args):
    rng = Rng(args.seed)
    fgs = []
    if args.fg:
        fgs += _foregrounds_from_dir(args.fg, args.quality, "train")
    if args.coarse_fg:
        fgs += _foregrounds_from_dir(args.coarse_fg, "coarse", "train")
    if args.test_fg:
        fgs += _foregrounds_from_dir(args.test_fg, "fine", "test")
    if args.procedural:
        n_fine, n_coarse, n_test = args.procedural
        fgs += synthdata.procedural_foregrounds(n_fine, n_coarse, args.size, rng.split("procedural"), n_test)
    if not fgs:
        raise DataError("no foregrounds: pass --fg/--coarse-fg/--test-fg or --procedural")
    if args.bg:
        bgs = [load_image(p)[0] for p in _images_in(args.bg)]
    else:
        bgs = synthdata.procedural_backgrounds(args.n_bg, args.size, rng.split("procedural"))
    m = synthdata.build_dataset(fgs, bgs, args.k, rng, args.out, workers=args.workers)
    print(f"{len(m)} records -> {Path(args.out) / 'manifest.tsv'}")


def cmd_degrade(args):
    from .train import parse_kv

    spec = DegradeSpec()
    if args.spec:
        p = Path(args.spec)
        if not p.is_file():
            raise DataError(f"{p}: no such spec file")
        try:
            spec = DegradeSpec.from_dict(parse_kv(p.read_text(encoding="utf-8")))
        except ValueError as exc:
            raise DataError(f"{p}: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(args.seed)
    files = _images_in(args.alpha)
    for p in files:
        save_image(degrade(load_matte(p), spec, rng.split(p.name)), out / f"{p.stem}.png")
    print(f"degraded {len(files)} masks -> {out}")


def cmd_train(args):
    from .train import TrainConfig, load_config, save_config, train_all

    cfg = load_config(args.config) if args.config else TrainConfig()
    manifest = synthdata.load_manifest(args.manifest)
    stages = ("mpn", "qun", "mrn") if args.stage == "all" else (args.stage,)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "train_config.tsv")
    _, results = train_all(manifest, cfg, out, stages=stages, log_path=out / "train.log")
    for name, res in results.items():
        print(f"{name}\tsteps={res.steps}\tfinal_loss={res.final_loss:.6f}")


def cmd_eval(args):
    from .metrics import evaluate
    from .pipeline import ModelBundle, infer

    bundle = ModelBundle.load(args.models)
    manifest = synthdata.load_manifest(args.manifest)
    report = evaluate(manifest, lambda img: infer(img, bundle).alpha, split=None if args.all else "test")
    if args.report:
        report.write(args.report)
    print(report.aggregate_row())


def _write_result(result, stem, out, bg=None, image=None):
    from .pipeline import recomposite

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(result.alpha, out / f"{stem}_alpha.png")
    save_image(result.fg_rgb, out / f"{stem}_fg.png")
    if bg is not None:
        bg_img, _ = load_image(bg)
        save_image(recomposite(result, bg_img, image=image), out / f"{stem}_composite.png")


def cmd_infer(args):
    from .pipeline import ModelBundle, infer

    bundle = ModelBundle.load(args.models)
    img, _ = load_image(args.image)
    result = infer(img, bundle)
    _write_result(result, Path(args.image).stem, args.out, args.bg, img if args.input_fg else None)
    print(f"alpha {result.alpha.shape[0]}x{result.alpha.shape[1]} -> {args.out}")


def cmd_refine(args):
    from .pipeline import ModelBundle, refine_external_mask

    bundle = ModelBundle.load(args.models)
    img, _ = load_image(args.image)
    result = refine_external_mask(img, load_matte(args.mask), bundle)
    _write_result(result, Path(args.image).stem, args.out, args.bg, img if args.input_fg else None)
    print(f"alpha {result.alpha.shape[0]}x{result.alpha.shape[1]} -> {args.out}")


def build_parser():
    parser = _Parser(prog="coarsematte", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="composite foregrounds onto backgrounds and write a manifest")
    p.add_argument("--fg", help="directory of RGBA foreground PNGs")
    p.add_argument("--quality", choices=[q.value for q in Quality], default="fine", help="quality of --fg")
    p.add_argument("--coarse-fg", help="directory of coarse-annotated RGBA foregrounds")
    p.add_argument("--test-fg", help="directory of fine RGBA foregrounds for the test split")
    p.add_argument("--bg", help="directory of background images")
    p.add_argument("--procedural", type=int, nargs=3, metavar=("FINE", "COARSE", "TEST"),
                   help="generate procedural foregrounds")
    p.add_argument("--size", type=_size, default=(192, 160), help="procedural image size H,W")
    p.add_argument("--n-bg", type=int, default=20, help="procedural backgrounds when --bg is absent")
    p.add_argument("--k", type=int, default=10, help="backgrounds per foreground")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("degrade", help="make coarse masks from fine alpha mattes")
    p.add_argument("--alpha", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", help="key<TAB>value file of DegradeSpec fields")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="train one stage or all three")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stage", choices=["mpn", "qun", "mrn", "all"], default="all")
    p.add_argument("--config", help="key<TAB>value file of TrainConfig fields")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a model bundle on the test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--report")
    p.add_argument("--all", action="store_true", help="evaluate every record, not just the test split")
    p.set_defaults(func=cmd_eval)

    for name, func, helptext in (("infer", cmd_infer, "predict a matte from an image"),
                                 ("refine", cmd_refine, "refine an external coarse mask")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--image", required=True)
        if name == "refine":
            p.add_argument("--mask", required=True)
        p.add_argument("--models", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--bg", help="background for an extra recomposited output")
        p.add_argument("--input-fg", action="store_true",
                       help="recomposite with the input image instead of the predicted foreground")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
