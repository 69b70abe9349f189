"""CSV ingestion, z-score normalization, windowing, and a synthetic mixture generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .linalg import CholFactor
from .matnorm import MatnormComponent, sample
from .mixloss import MixtureBank


class DataError(ValueError):
    """Malformed input series or impossible windowing request."""


@dataclass
class SeriesTable:
    timestamps: list[datetime]
    sensor_ids: list[str]
    values: np.ndarray  # (T, N)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.timestamps), len(self.sensor_ids)):
            raise DataError(
                f"values shape {self.values.shape} does not match "
                f"{len(self.timestamps)} timestamps x {len(self.sensor_ids)} sensors"
            )
        check_regular(self.timestamps)

    @property
    def interval(self) -> timedelta:
        return self.timestamps[1] - self.timestamps[0] if len(self.timestamps) > 1 else timedelta(minutes=5)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timestamp", *self.sensor_ids])
            for ts, row in zip(self.timestamps, self.values.tolist()):
                w.writerow([ts.isoformat(), *map(repr, row)])


def check_regular(timestamps: list[datetime], rows: list[int] | None = None) -> None:
    """Require strictly increasing timestamps with one constant step.

    ``rows`` gives the file row number of each timestamp for error messages;
    by default rows are counted from 1 over the data.
    """
    if len(timestamps) < 2:
        return
    where = (lambda i: f"row {rows[i]}") if rows is not None else (lambda i: f"data row {i + 1}")
    step = timestamps[1] - timestamps[0]
    for i in range(1, len(timestamps)):
        delta = timestamps[i] - timestamps[i - 1]
        if delta <= timedelta(0):
            raise DataError(f"timestamps not strictly increasing at {where(i)} ({timestamps[i].isoformat()})")
        if delta != step:
            raise DataError(
                f"irregular interval at {where(i)}: gap of {delta} between "
                f"{timestamps[i - 1].isoformat()} and {timestamps[i].isoformat()} (expected {step})"
            )


def load_csv(path) -> SeriesTable:
    """Read ``timestamp,<id1>,<id2>,...`` with ISO-8601 timestamps.

    Row numbers in error messages count the header as row 1.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: missing header row")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "timestamp" or len(header) < 2:
        raise DataError(f"{path}: header must be 'timestamp,<sensor ids...>', got {rows[0]!r}")
    sensor_ids = header[1:]
    timestamps, values, linenos = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
        try:
            ts = datetime.fromisoformat(row[0].strip())
        except ValueError:
            raise DataError(f"{path}: row {lineno}: bad timestamp {row[0]!r}") from None
        try:
            vals = [float(c) for c in row[1:]]
        except ValueError:
            raise DataError(f"{path}: row {lineno}: non-numeric cell in {row[1:]!r}") from None
        if not all(math.isfinite(v) for v in vals):
            raise DataError(f"{path}: row {lineno}: non-finite cell in {row[1:]!r}")
        timestamps.append(ts)
        values.append(vals)
        linenos.append(lineno)
    if not values:
        raise DataError(f"{path}: no observations")
    try:
        check_regular(timestamps, linenos)
    except DataError as e:
        raise DataError(f"{path}: {e}") from None
    return SeriesTable(timestamps, sensor_ids, np.array(values))


@dataclass(frozen=True)
class NormStats:
    """z-score statistics per sensor; the global variant repeats one value."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray, per_sensor: bool = False) -> "NormStats":
        values = np.asarray(values, dtype=np.float64)
        n = values.shape[1]
        if per_sensor:
            mean, std = values.mean(axis=0), values.std(axis=0)
        else:
            mean, std = np.full(n, values.mean()), np.full(n, values.std())
        if np.any(std <= 0):
            raise DataError("constant series: standard deviation is zero on the training split")
        return cls(mean, std)

    def normalize(self, v: np.ndarray) -> np.ndarray:
        """``v`` has sensors on axis -2."""
        return (v - self.mean[:, None]) / self.std[:, None]

    def denormalize(self, v: np.ndarray) -> np.ndarray:
        return v * self.std[:, None] + self.mean[:, None]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class WindowedDataset:
    """Normalized windows. ``starts[i]`` is the source row of the first X column."""

    x: np.ndarray  # (W, N, P)
    y: np.ndarray  # (W, N, Q)
    starts: np.ndarray
    time_of_day: np.ndarray  # minutes since midnight of the first forecast step
    norm: NormStats
    p: int
    q: int

    @property
    def n(self) -> int:
        return self.x.shape[1]

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "WindowedDataset":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.intp)
        return WindowedDataset(self.x[idx], self.y[idx], self.starts[idx], self.time_of_day[idx],
                               self.norm, self.p, self.q)


def window_starts(t: int, p: int, q: int, stride: int = 1, offset: int = 0) -> np.ndarray:
    return np.arange(offset, t - p - q + 1, stride)


def split_counts(n: int, splits) -> tuple[int, int, int]:
    fr = [float(s) for s in splits]
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise DataError(f"splits must be three non-negative fractions summing to 1, got {tuple(splits)}")
    n_train = int(round(fr[0] * n))
    n_val = int(round(fr[1] * n))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def window(table: SeriesTable, p: int, q: int, splits=(0.7, 0.1, 0.2), *, stride: int = 1, offset: int = 0,
           norm: NormStats | None = None, per_sensor: bool = False):
    """Slide windows over the table and split them chronologically into (train, val, test).

    Normalization is fitted on the rows spanned by training windows unless
    ``norm`` is given.
    """
    if p < 1 or q < 1 or stride < 1 or offset < 0:
        raise DataError(f"p, q, stride must be >= 1 and offset >= 0 (got p={p}, q={q}, stride={stride}, offset={offset})")
    t = table.values.shape[0]
    if p + q + offset > t:
        raise DataError(f"insufficient rows: need at least {p + q + offset} for p={p}, q={q}, got {t}")
    starts = window_starts(t, p, q, stride, offset)
    n_train, n_val, n_test = split_counts(len(starts), splits)
    if n_train == 0 and norm is None:
        raise DataError("training split is empty")
    if norm is None:
        tr = starts[:n_train]
        norm = NormStats.fit(table.values[tr[0]: tr[-1] + p + q], per_sensor=per_sensor)
    elif norm.mean.shape != (table.values.shape[1],):
        raise DataError(f"normalization defined for {norm.mean.shape[0]} sensors, table has {table.values.shape[1]}")

    series = norm.normalize(table.values.T)  # (N, T)
    x = np.stack([series[:, s: s + p] for s in starts]) if len(starts) else np.zeros((0, series.shape[0], p))
    y = np.stack([series[:, s + p: s + p + q] for s in starts]) if len(starts) else np.zeros((0, series.shape[0], q))
    t0 = table.timestamps[0]
    step = table.interval
    tod = np.array([_minutes_of_day(t0 + (s + p) * step) for s in starts], dtype=np.float64)
    full = WindowedDataset(x, y, starts, tod, norm, p, q)
    bounds = np.cumsum([0, n_train, n_val, n_test])
    return tuple(full.subset(np.arange(bounds[i], bounds[i + 1])) for i in range(3))


def _minutes_of_day(ts: datetime) -> float:
    return ts.hour * 60 + ts.minute + ts.second / 60.0


def normalized_bank(bank: MixtureBank, norm: NormStats) -> MixtureBank:
    """Express a raw-unit residual bank in normalized units.

    Normalized residuals are ``D^{-1} r`` with ``D = diag(std)``, so the spatial
    precision becomes ``D Lambda_N D`` and its factor ``D L_N``.
    """
    d = norm.std
    rows, _ = np.tril_indices(len(d), -1)
    comps = []
    for c in bank.components:
        sp = c.spatial
        comps.append(MatnormComponent(CholFactor(sp.dim, sp.strict_lower * d[rows], sp.log_diag + np.log(d)),
                                      c.temporal))
    return MixtureBank(tuple(comps))


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


class SpecError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid synth spec: " + "; ".join(problems))


def _cov_from_recipe(recipe: dict, dim: int, where: str, problems: list[str]) -> np.ndarray | None:
    if "cov" in recipe:
        cov = np.asarray(recipe["cov"], dtype=np.float64)
        if cov.shape != (dim, dim):
            problems.append(f"{where}.cov: expected {dim}x{dim}, got {cov.shape}")
            return None
    else:
        corr = float(recipe.get("corr", 0.0))
        scale = float(recipe.get("scale", 1.0))
        if not -1.0 < corr < 1.0:
            problems.append(f"{where}.corr must lie in (-1, 1), got {corr}")
            return None
        if not scale > 0:
            problems.append(f"{where}.scale must be > 0, got {scale}")
            return None
        idx = np.arange(dim)
        cov = scale * corr ** np.abs(idx[:, None] - idx[None, :])
    if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(0.5 * (cov + cov.T)).min() <= 0:
        problems.append(f"{where}: covariance is not symmetric positive definite")
        return None
    return cov


def factor_from_covariance(cov: np.ndarray) -> CholFactor:
    """Precision Cholesky factor of a covariance (generator setup only, not the training path)."""
    prec = np.linalg.inv(cov)
    return CholFactor.from_matrix(np.linalg.cholesky(0.5 * (prec + prec.T)))


@dataclass
class SynthSpec:
    """Ground truth for a generated series.

    The day is split into ``len(regime_schedule)`` equal buckets; each holds the
    component weights for windows whose forecast starts in that bucket. The
    mean process per sensor is ``base + sum_h amplitudes[h] * sin(2 pi (h+1) tod / 1440 + phase)``.
    """

    n: int
    q: int
    p: int
    k_true: int
    seed: int
    n_windows: int
    regime_schedule: list[list[float]]
    true_bank: MixtureBank
    base: float = 60.0
    amplitudes: list[float] = field(default_factory=lambda: [5.0])
    interval_minutes: int = 5
    start: str = "2024-01-01T00:00:00"
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        problems: list[str] = []
        known = {"N", "Q", "P", "K_true", "seed", "n_windows", "regime_schedule", "components",
                 "signal", "interval_minutes", "start"}
        for key in sorted(set(d) - known):
            problems.append(f"{key}: unknown field")

        def count(key, minimum=1, default=None):
            v = d.get(key, default)
            if v is None:
                problems.append(f"{key}: required")
                return None
            if not isinstance(v, int) or isinstance(v, bool) or v < minimum:
                problems.append(f"{key}: must be an integer >= {minimum}, got {v!r}")
                return None
            return v

        n, q, p, k = count("N"), count("Q"), count("P"), count("K_true")
        seed = count("seed", minimum=0, default=0)
        n_windows = count("n_windows")
        interval = count("interval_minutes", default=5)
        start = d.get("start", "2024-01-01T00:00:00")
        try:
            datetime.fromisoformat(start)
        except (TypeError, ValueError):
            problems.append(f"start: not an ISO-8601 timestamp: {start!r}")

        schedule = d.get("regime_schedule")
        if k is not None:
            if schedule is None:
                schedule = [[1.0 / k] * k]
            if not isinstance(schedule, list) or not schedule:
                problems.append("regime_schedule: must be a non-empty list of weight vectors")
            else:
                for i, wvec in enumerate(schedule):
                    if not isinstance(wvec, list) or len(wvec) != k:
                        problems.append(f"regime_schedule[{i}]: needs {k} weights")
                    elif any(w < 0 for w in wvec) or abs(sum(wvec) - 1.0) > 1e-9:
                        problems.append(f"regime_schedule[{i}]: weights must be >= 0 and sum to 1")

        comps = d.get("components")
        bank = None
        if k is not None and n is not None and q is not None:
            if comps is None:
                comps = [{}] * k
            if not isinstance(comps, list) or len(comps) != k:
                problems.append(f"components: need {k} entries")
            else:
                built = []
                for i, c in enumerate(comps):
                    cs = _cov_from_recipe(c.get("spatial", {}), n, f"components[{i}].spatial", problems)
                    ct = _cov_from_recipe(c.get("temporal", {}), q, f"components[{i}].temporal", problems)
                    if cs is not None and ct is not None:
                        built.append(MatnormComponent(factor_from_covariance(cs), factor_from_covariance(ct)))
                if len(built) == k:
                    bank = MixtureBank(tuple(built))

        signal = d.get("signal", {})
        base = float(signal.get("base", 60.0))
        amps = [float(a) for a in signal.get("amplitudes", [5.0])]
        if problems:
            raise SpecError(problems)
        return cls(n, q, p, k, seed, n_windows, [list(map(float, w)) for w in schedule], bank,
                   base, amps, interval, start, raw=dict(d))

    def schedule_weights(self, minutes: np.ndarray) -> np.ndarray:
        buckets = len(self.regime_schedule)
        idx = np.floor(np.asarray(minutes) / (1440.0 / buckets)).astype(int) % buckets
        return np.asarray(self.regime_schedule)[idx]


@dataclass
class SynthResult:
    table: SeriesTable
    labels: list[tuple[int, int]]  # (stride-1 window index, component)
    signal: np.ndarray  # (T, N) noise-free mean process
    block_components: np.ndarray

    def write_labels(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["window_index", "component"])
            w.writerows(self.labels)


def synth(spec: SynthSpec) -> SynthResult:
    """Generate a series whose residuals come in Q-step blocks.

    Each block draws a component from the schedule at its first step's
    time-of-day and adds a matrix-normal residual to the mean process. Windows
    whose forecast covers exactly one block are labelled.
    """
    lead = math.ceil(spec.p / spec.q)
    n_blocks = spec.n_windows + lead
    t = n_blocks * spec.q
    phase_rng, regime_rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3))

    t0 = datetime.fromisoformat(spec.start)
    step = timedelta(minutes=spec.interval_minutes)
    timestamps = [t0 + i * step for i in range(t)]
    minutes = np.array([_minutes_of_day(ts) for ts in timestamps])

    phases = phase_rng.uniform(0.0, 2 * np.pi, size=(len(spec.amplitudes), spec.n))
    signal = np.full((t, spec.n), spec.base)
    for h, amp in enumerate(spec.amplitudes):
        signal += amp * np.sin(2 * np.pi * (h + 1) * minutes[:, None] / 1440.0 + phases[h][None, :])

    block_weights = spec.schedule_weights(minutes[:: spec.q])
    u = regime_rng.random(n_blocks)
    comps = np.minimum((u[:, None] > np.cumsum(block_weights, axis=1)).sum(axis=1), spec.k_true - 1)

    noise = np.zeros((n_blocks, spec.n, spec.q))
    for k, comp in enumerate(spec.true_bank.components):
        idx = np.flatnonzero(comps == k)
        if len(idx):
            noise[idx] = sample(comp, noise_rng, size=len(idx))
    values = signal + noise.transpose(0, 2, 1).reshape(t, spec.n)

    labels = [(b * spec.q - spec.p, int(comps[b])) for b in range(lead, n_blocks)]
    table = SeriesTable(timestamps, [f"s{i}" for i in range(spec.n)], values)
    return SynthResult(table, labels, signal, comps)


def aligned_offset(p: int, q: int) -> int:
    """Window offset whose forecast steps line up with synthetic Q-blocks (use with stride=q)."""
    return (-p) % q
