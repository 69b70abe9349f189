"""Per-horizon accuracy metrics and probabilistic evaluation of checkpoints."""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .data import WindowedDataset
from .linalg import ShapeError
from .mixloss import batch_nll

DEFAULT_HORIZONS = (3, 6, 9, 12)
MAPE_MASK = 1e-6


@dataclass
class MetricsReport:
    """RMSE/MAE in data units and MAPE in percent, one entry per horizon step (1-based)."""

    horizons: list[int]
    rmse: list[float]
    mape: list[float]
    mae: list[float]
    n_windows: int
    mean_nll: float | None = None  # nats per window
    nq: int | None = None
    mape_excluded: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["horizon", "rmse", "mape", "mae", "mape_excluded"])
            for row in zip(self.horizons, self.rmse, self.mape, self.mae, self.mape_excluded):
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), row[4]])


def default_horizons(q: int) -> list[int]:
    hs = [h for h in DEFAULT_HORIZONS if h <= q]
    return hs or [q]


def metrics(pred, truth, horizons=None, mask_threshold: float = MAPE_MASK) -> MetricsReport:
    """Metrics over (W, N, Q) de-normalized forecasts."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match truth shape {truth.shape}")
    if pred.ndim != 3 or pred.shape[0] == 0 or pred.size == 0:
        raise ValueError("metrics need a non-empty (windows, sensors, horizon) array")
    q = pred.shape[2]
    horizons = default_horizons(q) if horizons is None else [int(h) for h in horizons]
    bad = [h for h in horizons if not 1 <= h <= q]
    if bad:
        raise ValueError(f"horizons {bad} outside [1, {q}]")
    rmse, mape, mae, excluded = [], [], [], []
    for h in horizons:
        err = pred[:, :, h - 1] - truth[:, :, h - 1]
        tv = truth[:, :, h - 1]
        rmse.append(float(np.sqrt(np.mean(err * err))))
        mae.append(float(np.mean(np.abs(err))))
        keep = np.abs(tv) > mask_threshold
        excluded.append(int(keep.size - keep.sum()))
        mape.append(float(100.0 * np.mean(np.abs(err[keep]) / np.abs(tv[keep]))) if keep.any() else float("nan"))
    return MetricsReport(horizons, rmse, mape, mae, int(pred.shape[0]), mape_excluded=excluded)


def eval_nll(ckpt: Checkpoint, ds: WindowedDataset) -> float:
    """Mean mixture NLL per window on normalized residuals."""
    out = ckpt.predict(ds)
    return float(np.mean(batch_nll(ckpt.bank, out.logits, ds.y - out.mean)))


def evaluate(ckpt: Checkpoint, ds: WindowedDataset, horizons=None) -> MetricsReport:
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    out = ckpt.predict(ds)
    report = metrics(ds.norm.denormalize(out.mean), ds.norm.denormalize(ds.y), horizons)
    report.mean_nll = float(np.mean(batch_nll(ckpt.bank, out.logits, ds.y - out.mean)))
    report.nq = ds.n * ds.q
    return report


def weight_trajectory(ckpt: Checkpoint, ds: WindowedDataset) -> list[tuple[float, np.ndarray]]:
    out = ckpt.predict(ds)
    return [(float(t), w) for t, w in zip(ds.time_of_day, out.weights)]


def write_weight_trajectory(records, starts, path) -> None:
    k = len(records[0][1]) if records else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window_start", "time_of_day", *(f"w{j}" for j in range(k))])
        for s, (tod, wt) in zip(starts, records):
            w.writerow([int(s), repr(tod), *map(repr, wt.tolist())])


def bucket_average(time_of_day, weights, n_buckets: int = 24) -> tuple[np.ndarray, np.ndarray]:
    """Average weight vectors by time-of-day bucket. Returns (bucket starts in minutes, means) for non-empty buckets."""
    tod = np.asarray(time_of_day, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    idx = np.floor(tod / (1440.0 / n_buckets)).astype(int) % n_buckets
    starts, means = [], []
    for b in range(n_buckets):
        sel = idx == b
        if sel.any():
            starts.append(b * 1440.0 / n_buckets)
            means.append(weights[sel].mean(axis=0))
    return np.array(starts), np.array(means)


def best_permutation(k: int, score) -> tuple[int, ...]:
    """Exhaustive search over the K! relabellings for the one maximizing ``score(perm)``."""
    return max(itertools.permutations(range(k)), key=score)


def label_agreement(pred_labels, true_labels, k: int) -> tuple[float, tuple[int, ...]]:
    """Accuracy of predicted component labels under the best relabelling (K! <= 120)."""
    pred_labels = np.asarray(pred_labels)
    true_labels = np.asarray(true_labels)
    perm = best_permutation(k, lambda p: float(np.mean(np.asarray(p)[pred_labels] == true_labels)))
    return float(np.mean(np.asarray(perm)[pred_labels] == true_labels)), perm


def schedule_correlation(est, truth) -> tuple[float, tuple[int, ...]]:
    """Worst per-component Pearson r between estimated and true (buckets, K) weights, best permutation.

    ``perm[j]`` is the true component matched to estimated component j.
    """
    est = np.asarray(est, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    k = est.shape[1]

    def worst(perm):
        rs = []
        for j in range(k):
            a, b = est[:, j], truth[:, perm[j]]
            if np.std(a) == 0 or np.std(b) == 0:
                rs.append(-1.0)
            else:
                rs.append(float(np.corrcoef(a, b)[0, 1]))
        return min(rs)

    perm = best_permutation(k, worst)
    return worst(perm), perm
