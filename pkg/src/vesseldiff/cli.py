"""Command-line entry point: ``vesseldiff <command> ...``.

Exit codes: 0 success, 1 runtime failure (one JSON line on stderr),
2 usage or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config

log = logging.getLogger("vesseldiff")


class UsageError(Exception):
    """Bad arguments detected after parsing; exits with status 2."""


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def _non_negative_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {value}")
    return value


def _key_value(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=int, help="overrides the configured seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--set", dest="overrides", type=_key_value, action="append", default=[],
                        metavar="KEY=VALUE", help="override one dotted config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vesseldiff", parents=[common],
                                description="Diffusion-adversarial self-supervised vessel segmentation.")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fractal", parents=[common], help="write synthetic fractal masks")
    f.add_argument("--count", type=_positive_int, required=True)
    f.add_argument("--size", type=_positive_int, help="canvas size (default: fractal.canvas_size)")

    t = sub.add_parser("train", parents=[common], help="train from a dataset layout")
    t.add_argument("--data", type=Path, help="dataset root (default: data.root)")
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")
    t.add_argument("--steps", type=_non_negative_int, help="step cap (overrides train.max_steps)")

    s = sub.add_parser("segment", parents=[common], help="segment every image in a folder")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--in", dest="input", type=Path, required=True)
    s.add_argument("--threshold", type=float)
    s.add_argument("--t-a", dest="t_a", type=_non_negative_int)
    s.add_argument("--patched", action="store_true", help="768 px 3x3 patch grid (retinal images)")
    s.add_argument("--size", type=_positive_int, help="resize inputs to this size first")

    for name, helptext in (("eval", "score a checkpoint on a labelled split"),
                           ("robustness", "evaluate under Gaussian noise at every configured sigma")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("--ckpt", type=Path, required=True)
        e.add_argument("--data", type=Path, required=True)
        e.add_argument("--split", default="test")
        e.add_argument("--dataset", help="dataset tag for the report (default: folder name)")
        e.add_argument("--size", type=_positive_int, help="evaluation size (default: data.eval_size or data.size)")
        e.add_argument("--no-plot", action="store_true")
        if name == "eval":
            e.add_argument("--sigma", type=float, default=0.0)

    m = sub.add_parser("smoke", parents=[common], help="end-to-end self-test on a synthetic corpus")
    m.add_argument("--steps", type=_non_negative_int, help="training steps (0 skips training)")
    return p


def _config(args):
    overrides = dict(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = str(args.out)
    return load_config(args.config, overrides)


def _out_dir(args, cfg) -> Path:
    out = Path(args.out) if args.out is not None else Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_fractal(args, cfg) -> int:
    from .data import write_png
    from .fractal import FractalSpec, synthesize_fractal_mask

    fc = cfg.fractal
    spec = FractalSpec(canvas_size=args.size or fc.canvas_size, thickness_range=(fc.thickness_min, fc.thickness_max),
                       branch_depth=fc.branch_depth, length_decay=fc.length_decay, root_length=fc.root_length)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args, cfg)
    for i in range(args.count):
        mask_seed = int(np.random.SeedSequence([cfg.seed, i]).generate_state(1, dtype=np.uint64)[0])
        write_png(out / f"fractal_{i:06d}.png", synthesize_fractal_mask(spec.with_seed(mask_seed)) * 255)
    print(json.dumps({"written": args.count, "out": str(out)}))
    return 0


def cmd_train(args, cfg) -> int:
    from .data import DatasetLayout, normalize, read_gray, read_mask
    from .plotting import plot_training_curves
    from .training import checkpoint_load, fit, init_state, read_log, training_data

    if args.data is not None:
        cfg.data.root = str(args.data)
    if not cfg.data.root:
        raise UsageError("no dataset: pass --data or set data.root")
    if args.steps is not None:
        cfg.train.max_steps = args.steps
    out = _out_dir(args, cfg)
    if args.resume is not None:
        state = checkpoint_load(args.resume)
        state.config.train.max_steps = cfg.train.max_steps
        state.config.train.epochs = cfg.train.epochs
        cfg = state.config
    else:
        state = init_state(cfg)
    layout = DatasetLayout.open(cfg.data.root)
    size = cfg.data.eval_size or cfg.data.size
    val = [(normalize(read_gray(i, size)), read_mask(g, size)) for i, g in layout.labeled_pairs("val")]
    reports = fit(state, training_data(cfg), out, val_pairs=val or None)
    if reports:
        plot_training_curves(read_log(out / "train_log.csv"), out / "training_curves.png")
    print(json.dumps({"steps": state.step, "epoch": state.epoch, "best": _finite_or_none(state.best_score),
                      "out": str(out)}))
    return 0


def _finite_or_none(x):
    return x if x is not None and np.isfinite(x) else None


def cmd_segment(args, cfg) -> int:
    from .data import list_images, normalize, read_gray, write_png
    from .inference import bundle_predictor, segment, segment_patched
    from .training import load_bundle

    bundle, _ = load_bundle(args.ckpt)
    threshold = cfg.eval.threshold if args.threshold is None else args.threshold
    t_a = cfg.eval.t_a if args.t_a is None else args.t_a
    if not 0 < threshold < 1:
        raise UsageError(f"--threshold must lie in (0, 1), got {threshold}")
    images = list_images(args.input)
    if not images:
        raise FileNotFoundError(f"no images under {args.input}")
    out = _out_dir(args, cfg)
    for path in images:
        img = normalize(read_gray(path, args.size))
        if args.patched:
            res = segment_patched(bundle_predictor(bundle, t_a), img, threshold)
        else:
            res = segment(bundle, img[None], t_a=t_a, threshold=threshold, source_ids=[path.name])
        write_png(out / f"{path.stem}_soft.png", np.rint(res.soft[0] * 255))
        write_png(out / f"{path.stem}_mask.png", res.binary[0] * 255)
    print(json.dumps({"segmented": len(images), "out": str(out)}))
    return 0


def _labelled(args, cfg):
    from .data import DatasetLayout, normalize, read_gray, read_mask

    layout = DatasetLayout.open(args.data)
    pairs = layout.labeled_pairs(args.split)
    if not pairs:
        raise FileNotFoundError(f"split {args.split!r} of {args.data} lists no labelled images")
    size = args.size or cfg.data.eval_size or cfg.data.size
    return [(img.name, normalize(read_gray(img, size)), read_mask(gt, size)) for img, gt in pairs]


def _evaluate(args, cfg, sigmas) -> int:
    from .evaluation import emit_report, format_summary, robustness_sweep
    from .inference import bundle_predictor
    from .training import load_bundle

    bundle, _ = load_bundle(args.ckpt)
    samples = _labelled(args, cfg)
    dataset = args.dataset or Path(args.data).name
    rows, summaries = robustness_sweep(bundle_predictor(bundle, cfg.eval.t_a), samples, sigmas, cfg.eval.threshold,
                                       dataset, cfg.eval.noise_seed)
    written = emit_report(rows, _out_dir(args, cfg), plot=not args.no_plot)
    for s in summaries:
        log.info("%s sigma=%g  %s", dataset, s["sigma"], format_summary(s))
    print(json.dumps({"rows": len(rows), "summary": str(written["summary"]),
                      "dice": [s["dice_mean"] for s in summaries]}))
    return 0


def cmd_eval(args, cfg) -> int:
    if args.sigma < 0:
        raise UsageError("--sigma must be non-negative")
    return _evaluate(args, cfg, [args.sigma])


def cmd_robustness(args, cfg) -> int:
    return _evaluate(args, cfg, list(cfg.eval.sigmas))


def cmd_smoke(args, cfg) -> int:
    from .smoke import run_smoke

    out = Path(args.out) if args.out is not None else Path("runs/smoke")
    overrides = dict(args.overrides)
    res = run_smoke(out, seed=cfg.seed, steps=args.steps, overrides=overrides)
    for name, ok in res.checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    print(json.dumps(res.report(), sort_keys=True))
    return 0 if res.passed else 1


COMMANDS = {"fractal": cmd_fractal, "train": cmd_train, "segment": cmd_segment, "eval": cmd_eval,
            "robustness": cmd_robustness, "smoke": cmd_smoke}


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _config(args)
    except (ConfigError, FileNotFoundError) as exc:
        return _fail(2, type(exc).__name__, str(exc))
    try:
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        return _fail(2, type(exc).__name__, str(exc))
    except KeyboardInterrupt:
        return _fail(1, "KeyboardInterrupt", "interrupted")
    except Exception as exc:  # any runtime failure becomes exit 1 with a parseable line
        log.debug("command failed", exc_info=True)
        return _fail(1, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
