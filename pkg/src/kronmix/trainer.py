"""Joint training of the network heads and every Cholesky factor."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .checkpoint import Checkpoint
from .data import WindowedDataset
from .matnorm import MatnormComponent
from .mixloss import LossConfig, MixtureBank, bank_from_arrays, bank_to_arrays, batch_loss
from .model import ModelConfig, ModelParams, batch_backward, batch_forward

log = logging.getLogger(__name__)

BANK_KEYS = ("spatial_lower", "spatial_log_diag", "temporal_lower", "temporal_log_diag")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config: " + "; ".join(problems))


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, term: str, value: float):
        self.epoch, self.batch, self.term, self.value = epoch, batch, term, value
        super().__init__(f"non-finite {term} loss ({value}) at epoch {epoch}, batch {batch}")


@dataclass
class TrainConfig:
    """Training, windowing, and architecture settings.

    The optimized objective per window is ``(1 - rho) * base + rho * nll`` and a
    batch averages it over windows. ``factor_learning_rate`` defaults to
    ``learning_rate``.
    """

    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    factor_learning_rate: float | None = None
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rho: float = 0.001
    base: str = "mse"
    K: int = 2
    seed: int = 0
    early_stop_patience: int = 10
    deterministic: bool = True
    # ablations
    diagonal_only: bool = False
    freeze_factors: bool = False
    init_spread: float = 0.0
    # windowing
    p: int = 12
    q: int = 12
    splits: tuple[float, float, float] = (0.7, 0.1, 0.2)
    stride: int = 1
    offset: int = 0
    per_sensor_norm: bool = False
    # architecture
    hidden_width: int = 64
    hidden_depth: int = 2
    head_width: int = 64
    head_depth: int = 1
    activation: str = "relu"

    def __post_init__(self):
        self.splits = tuple(float(s) for s in self.splits)
        problems = []
        if not self.learning_rate > 0:
            problems.append(f"learning_rate: must be > 0, got {self.learning_rate}")
        if self.factor_learning_rate is not None and not self.factor_learning_rate > 0:
            problems.append(f"factor_learning_rate: must be > 0, got {self.factor_learning_rate}")
        if not (isinstance(self.rho, (int, float)) and 0.0 <= self.rho <= 1.0):
            problems.append(f"rho: must lie in [0, 1], got {self.rho}")
        if self.optimizer not in ("adam", "sgd"):
            problems.append(f"optimizer: must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.base not in ("mse", "mae"):
            problems.append(f"base: must be 'mse' or 'mae', got {self.base!r}")
        for name in ("epochs", "batch_size", "K", "p", "q", "stride", "hidden_width", "hidden_depth", "head_width"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                problems.append(f"{name}: must be an integer >= 1, got {v!r}")
        for name in ("early_stop_patience", "offset", "head_depth", "seed"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                problems.append(f"{name}: must be an integer >= 0, got {v!r}")
        if len(self.splits) != 3 or any(s < 0 for s in self.splits) or abs(sum(self.splits) - 1) > 1e-9:
            problems.append(f"splits: must be three non-negative fractions summing to 1, got {self.splits}")
        if self.activation not in ("relu", "tanh"):
            problems.append(f"activation: must be 'relu' or 'tanh', got {self.activation!r}")
        if problems:
            raise ConfigError(problems)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"{k}: unknown field" for k in unknown])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["splits"] = list(self.splits)
        return d

    def model_config(self, n: int) -> ModelConfig:
        return ModelConfig(n=n, p=self.p, q=self.q, k=self.K, hidden_width=self.hidden_width,
                           hidden_depth=self.hidden_depth, activation=self.activation,
                           head_width=self.head_width, head_depth=self.head_depth)

    def data_config(self) -> dict:
        return {"p": self.p, "q": self.q, "splits": list(self.splits), "stride": self.stride,
                "offset": self.offset, "per_sensor_norm": self.per_sensor_norm}


def init_bank(n: int, q: int, k: int, spread: float = 0.0) -> MixtureBank:
    """Diagonal precision factors; identity unless ``spread`` is non-zero.

    With ``spread > 0`` component j's spatial factor is ``exp(s_j) I`` with
    ``s_j`` evenly spaced on ``[-spread/2, spread/2]``, so components start
    at distinct scales instead of identical copies.
    """
    if min(n, q, k) < 1:
        raise ValueError(f"n, q, k must be >= 1, got {(n, q, k)}")
    bank = MixtureBank.identity(n, q, k)
    if spread == 0.0 or k == 1:
        return bank
    offsets = np.linspace(-spread / 2, spread / 2, k)
    return MixtureBank(tuple(MatnormComponent(c.spatial.scaled(float(np.exp(s))), c.temporal)
                             for c, s in zip(bank.components, offsets)))


class SGD:
    def __init__(self, lr: dict[str, float]):
        self.lr = lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for k, p in params.items():
            p -= self.lr[k] * grads[k]


class Adam:
    """Bias-corrected Adam with a per-array learning rate."""

    def __init__(self, lr: dict[str, float], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            p -= (self.lr[k] / bc1) * self.m[k] / (np.sqrt(self.v[k] / bc2) + self.eps)


@dataclass
class TrainResult:
    checkpoint: Checkpoint  # validation-best parameters
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_record: list[float] = field(default_factory=list)
    final_params: ModelParams | None = None
    final_bank: MixtureBank | None = None

    def write_history(self, path) -> None:
        write_history(self.history, path)


HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_nll", "val_rmse")


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"], *(repr(float(row[c])) for c in HISTORY_COLUMNS[1:])])


def _bank_of(state: dict[str, np.ndarray]) -> MixtureBank:
    return bank_from_arrays(*(state["bank." + k] for k in BANK_KEYS))


def evaluate_loss(params: ModelParams, bank: MixtureBank, ds: WindowedDataset, loss_cfg: LossConfig,
                  batch_size: int = 1024) -> dict[str, float]:
    """Mean total/NLL loss and de-normalized RMSE over a dataset."""
    total = nll = sq = 0.0
    for i in range(0, len(ds), batch_size):
        x, y = ds.x[i: i + batch_size], ds.y[i: i + batch_size]
        out, _ = batch_forward(params, x)
        bl = batch_loss(y, out.mean, bank, out.logits, loss_cfg, with_grad=False)
        total += bl.total * len(x)
        nll += bl.nll * len(x)
        err = ds.norm.denormalize(out.mean) - ds.norm.denormalize(y)
        sq += float(np.sum(err * err))
    n = len(ds)
    return {"loss": total / n, "nll": nll / n, "rmse": float(np.sqrt(sq / (n * ds.n * ds.q)))}


def train(train_ds: WindowedDataset, val_ds: WindowedDataset, cfg: TrainConfig) -> TrainResult:
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError(f"train and validation splits must be non-empty (got {len(train_ds)}, {len(val_ds)})")
    if (train_ds.n, train_ds.p, train_ds.q) != (val_ds.n, val_ds.p, val_ds.q):
        raise ValueError("train and validation windows have different shapes")
    if (train_ds.p, train_ds.q) != (cfg.p, cfg.q):
        raise ValueError(f"config expects P={cfg.p}, Q={cfg.q}; data has P={train_ds.p}, Q={train_ds.q}")
    n = train_ds.n
    loss_cfg = LossConfig(cfg.rho, cfg.base)
    model_cfg = cfg.model_config(n)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    params = ModelParams.init(model_cfg, int(seeds[0].generate_state(1)[0]))
    shuffle_rng = np.random.default_rng(seeds[1])

    bank0 = init_bank(n, cfg.q, cfg.K, cfg.init_spread)
    state = dict(params.arrays)
    state.update({"bank." + k: v.copy() for k, v in bank_to_arrays(bank0).items()})
    factor_lr = cfg.factor_learning_rate or cfg.learning_rate
    lr = {k: (factor_lr if k.startswith("bank.") else cfg.learning_rate) for k in state}
    if cfg.optimizer == "adam":
        opt = Adam(lr, cfg.beta1, cfg.beta2, cfg.eps)
    else:
        opt = SGD(lr)

    def snapshot():
        return params.copy(), _bank_of(state)

    best_params, best_bank = snapshot()
    best_val = np.inf
    best_epoch = 0
    stale = 0
    history, best_record = [], []
    n_train = len(train_ds)
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(n_train)
        running = 0.0
        for bi, start in enumerate(range(0, n_train, cfg.batch_size)):
            idx = perm[start: start + cfg.batch_size]
            bank = _bank_of(state)
            out, cache = batch_forward(params, train_ds.x[idx])
            bl = batch_loss(train_ds.y[idx], out.mean, bank, out.logits, loss_cfg)
            for term, value in (("base", bl.base), ("nll", bl.nll)):
                if not np.isfinite(value):
                    raise TrainingDivergedError(epoch, bi, term, value)
            grads = batch_backward(params, cache, bl.grad.mean, bl.grad.logits)
            for k in BANK_KEYS:
                g = getattr(bl.grad, k)
                if cfg.freeze_factors or (cfg.diagonal_only and k.endswith("_lower")):
                    g = np.zeros_like(g)
                grads["bank." + k] = g
            opt.step(state, grads)
            running += bl.total * len(idx)
        val = evaluate_loss(params, _bank_of(state), val_ds, loss_cfg)
        if not np.isfinite(val["loss"]):
            raise TrainingDivergedError(epoch, -1, "validation", val["loss"])
        history.append({"epoch": epoch, "train_loss": running / n_train, "val_loss": val["loss"],
                        "val_nll": val["nll"], "val_rmse": val["rmse"]})
        if val["loss"] < best_val:
            best_val, best_epoch, stale = val["loss"], epoch, 0
            best_params, best_bank = snapshot()
        else:
            stale += 1
        best_record.append(best_val)
        log.info("epoch %d train %.5f val %.5f nll %.5f rmse %.4f", epoch, running / n_train,
                 val["loss"], val["nll"], val["rmse"])
        if cfg.early_stop_patience and stale >= cfg.early_stop_patience:
            break

    ckpt = Checkpoint(best_params, best_bank, train_ds.norm, cfg.data_config(), cfg.to_dict())
    return TrainResult(ckpt, history, best_epoch, best_record, params.copy(), _bank_of(state))
