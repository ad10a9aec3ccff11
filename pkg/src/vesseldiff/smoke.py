"""End-to-end self-test on the synthetic smoke corpus."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig, smoke_config
from .data import DatasetLayout, make_smoke_corpus, normalize, read_gray, read_mask
from .evaluation import emit_report, robustness_sweep
from .inference import bundle_predictor
from .training import ModelBundle, checkpoint_save, fit, init_state, load_bundle, training_data

log = logging.getLogger(__name__)

# pass thresholds of the self-test
MIN_DICE = 0.7
MIN_LOSS_DROP = 0.5
MA_WINDOW = 100
# validation cadence in epochs (one smoke epoch is four steps)
VALIDATE_EVERY = 25


@dataclass
class SmokeResult:
    config: TrainConfig
    bundle: ModelBundle
    total_g: list
    dice: float
    summaries: list
    elapsed: float
    checks: dict = field(default_factory=dict)
    sweep_seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def moving_average(self, window: int = MA_WINDOW) -> np.ndarray:
        x = np.asarray(self.total_g, dtype=np.float64)
        if len(x) < window:
            return x[:0]
        return np.convolve(x, np.ones(window) / window, mode="valid")

    @property
    def loss_drop(self) -> float | None:
        ma = self.moving_average()
        if len(ma) == 0:
            return None
        return float(1.0 - ma[-1] / ma[0])

    def report(self) -> dict:
        return {
            "steps": len(self.total_g),
            "seed": self.config.seed,
            "dice": self.dice,
            "loss_drop": self.loss_drop,
            "robustness_dice": [s["dice_mean"] for s in self.summaries],
            "sigmas": [s["sigma"] for s in self.summaries],
            "checks": self.checks,
            "passed": self.passed,
        }


def smoke_samples(root, split: str = "test") -> list:
    layout = DatasetLayout.open(root)
    size = json.loads((Path(root) / "corpus.json").read_text())["size"]
    return [(img.name, normalize(read_gray(img, size)), read_mask(gt, size))
            for img, gt in layout.labeled_pairs(split)]


def run_smoke(out_dir, seed: int = 0, steps: int | None = None, overrides: dict | None = None,
              corpus_seed: int = 0, plot: bool = True) -> SmokeResult:
    """Build the corpus, train tiny networks, segment and score; nothing is downloaded.

    ``steps=0`` skips training and scores the random initialisation.
    """
    t0 = time.time()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = make_smoke_corpus(out / "smoke", seed=corpus_seed)
    cfg = smoke_config(seed=seed, **{"train.validate_every": VALIDATE_EVERY, **(overrides or {})})
    if steps is not None:
        cfg.train.max_steps = int(steps)
    cfg.data.root = str(root)
    cfg.out = str(out)

    state = init_state(cfg)
    reports = []
    val = [(img, gt) for _, img, gt in smoke_samples(root, "val")]
    if cfg.train.max_steps > 0:
        reports = fit(state, training_data(cfg, root), out, val_pairs=val, max_steps=cfg.train.max_steps)
    else:
        checkpoint_save(state, out / "last.pt")
    total_g = [r.total_g for r in reports]
    bundle = state.bundle
    if (out / "best.pt").is_file():
        # validation-best selection, as for full-scale runs
        bundle, _ = load_bundle(out / "best.pt")

    samples = smoke_samples(root)
    predict = bundle_predictor(bundle, cfg.eval.t_a)
    t_sweep = time.time()
    rows, summaries = robustness_sweep(predict, samples, cfg.eval.sigmas, cfg.eval.threshold, "smoke",
                                       cfg.eval.noise_seed)
    sweep_seconds = time.time() - t_sweep
    emit_report(rows, out, plot=plot)
    if plot and total_g:
        from .plotting import plot_training_curves
        from .training import read_log

        plot_training_curves(read_log(out / "train_log.csv"), out / "training_curves.png")

    clean = next(s for s in summaries if s["sigma"] == 0)
    dice_by_sigma = [s["dice_mean"] for s in sorted(summaries, key=lambda s: s["sigma"])]
    result = SmokeResult(cfg, bundle, total_g, clean["dice_mean"], summaries, 0.0,
                          sweep_seconds=sweep_seconds)
    drop = result.loss_drop
    result.checks = {
        "loss_drop": drop is not None and drop >= MIN_LOSS_DROP,
        "dice": result.dice >= MIN_DICE,
        "robustness_monotone": all(a >= b for a, b in zip(dice_by_sigma, dice_by_sigma[1:])),
    }
    result.elapsed = time.time() - t0
    (out / "smoke_report.json").write_text(json.dumps(result.report(), indent=2, sort_keys=True) + "\n")
    log.info("smoke finished in %.0fs: %s", result.elapsed, result.report())
    return result
