"""Overlap metrics, dataset evaluation, noise sweeps and report emission."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import corrupt_gaussian, denormalize, gaussian_noise, normalize

CSV_FIELDS = ("id", "dataset", "sigma", "iou", "dice", "precision")
METRICS = ("iou", "dice", "precision")


@dataclass
class MetricRow:
    id: str
    dataset: str
    sigma: float
    iou: float
    dice: float
    precision: float


def _binary(a, name):
    a = np.asarray(a)
    if a.dtype == bool:
        return a
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} mask is not binary")
    return a.astype(bool)


def confusion_counts(pred, gt) -> tuple[int, int, int, int]:
    """``(TP, FP, FN, TN)`` pixel counts of two binary masks."""
    p, g = _binary(pred, "predicted"), _binary(gt, "ground-truth")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return tp, fp, fn, tn


def metrics_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    # both masks empty: a correct all-background answer
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    iou = tp / (tp + fp + fn)
    dice = 2 * tp / (2 * tp + fp + fn)
    precision = tp / (tp + fp) if tp + fp else 0.0
    return iou, dice, precision


def metrics(pred, gt) -> tuple[float, float, float]:
    """``(IoU, Dice, Precision)`` of a binary prediction against ground truth."""
    tp, fp, fn, _ = confusion_counts(pred, gt)
    return metrics_from_counts(tp, fp, fn)


def summarize(rows) -> dict:
    """Mean and population standard deviation of each metric."""
    if not rows:
        raise ValueError("no rows to summarize")
    out = {"n": len(rows)}
    for m in METRICS:
        vals = np.array([getattr(r, m) for r in rows], dtype=np.float64)
        out[f"{m}_mean"] = float(np.mean(vals))
        out[f"{m}_std"] = float(np.std(vals))
    return out


def evaluate_dataset(predict, samples, sigma: float = 0.0, threshold: float = 0.5, dataset: str = "data",
                     noise_seed: int = 0):
    """Score ``predict`` on ``(id, image, gt)`` samples, optionally corrupting inputs first.

    Images are on the ``[-1, 1]`` scale.  For ``sigma > 0`` Gaussian noise is
    added on the 0-255 scale; the standard-normal draw for an image depends
    only on ``noise_seed`` and its position, so different sigmas share it.
    Returns ``(rows, summary)``.
    """
    rows = []
    for k, (sid, image, gt) in enumerate(samples):
        if gt is None:
            raise ValueError(f"sample {sid} has no ground truth")
        img = np.asarray(image, dtype=np.float32)
        if sigma > 0:
            z = gaussian_noise(img.shape, noise_seed * 1_000_003 + k)
            img = normalize(corrupt_gaussian(denormalize(img), sigma, noise=z))
        soft = np.asarray(predict(img))
        iou, dice, prec = metrics((soft >= threshold).astype(np.uint8), np.asarray(gt))
        rows.append(MetricRow(str(sid), dataset, float(sigma), iou, dice, prec))
    return rows, summarize(rows)


def robustness_sweep(predict, samples, sigmas=(0, 10, 25, 50), threshold: float = 0.5, dataset: str = "data",
                     noise_seed: int = 0):
    rows, summaries = [], []
    for s in sigmas:
        r, summ = evaluate_dataset(predict, samples, s, threshold, dataset, noise_seed)
        rows.extend(r)
        summaries.append({"dataset": dataset, "sigma": float(s), **summ})
    return rows, summaries


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


def write_rows(path, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in rows:
            d = asdict(r)
            w.writerow({k: (repr(d[k]) if isinstance(d[k], float) else d[k]) for k in CSV_FIELDS})
    return path


def read_rows(path) -> list[MetricRow]:
    with open(path, newline="") as fh:
        return [MetricRow(r["id"], r["dataset"], float(r["sigma"]), float(r["iou"]), float(r["dice"]),
                          float(r["precision"])) for r in csv.DictReader(fh)]


SUMMARY_FIELDS = ("dataset", "sigma", "n") + tuple(f"{m}_{s}" for m in METRICS for s in ("mean", "std"))


def summary_table(rows) -> list[dict]:
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.dataset, r.sigma), []).append(r)
    return [{"dataset": d, "sigma": s, **summarize(g)} for (d, s), g in sorted(groups.items())]


def emit_report(rows, out_dir, plot: bool = True) -> dict:
    """Per-dataset CSVs, one summary CSV and metric-vs-sigma plots.

    Returns the paths written, keyed by kind.
    """
    if not rows:
        raise ValueError("no rows to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {"datasets": {}, "plots": {}}
    for name in sorted({r.dataset for r in rows}):
        written["datasets"][name] = write_rows(out / f"metrics_{name}.csv", [r for r in rows if r.dataset == name])
    table = summary_table(rows)
    summary_path = out / "summary.csv"
    with open(summary_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        for row in table:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    written["summary"] = summary_path
    if plot:
        from .plotting import plot_metric_vs_sigma

        for name in sorted({r.dataset for r in rows}):
            written["plots"][name] = plot_metric_vs_sigma([t for t in table if t["dataset"] == name],
                                                          out / f"robustness_{name}.png", title=name)
    return written


def format_summary(summary: dict) -> str:
    """``mean±std`` per metric, three decimals."""
    return "  ".join(f"{m}={summary[f'{m}_mean']:.3f}±{summary[f'{m}_std']:.3f}" for m in METRICS)
