"""Single-file JSON checkpoints: model config, parameter arrays, factor bank, and normalization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import NormStats, WindowedDataset
from .linalg import ShapeError
from .mixloss import MixtureBank, bank_from_arrays, bank_to_arrays, softmax
from .model import ForecastOutput, ModelConfig, ModelParams, batch_forward

FORMAT_VERSION = "1.0"


class CheckpointVersionError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: ModelParams
    bank: MixtureBank
    norm: NormStats
    data: dict = field(default_factory=dict)  # windowing settings used in training
    train_config: dict = field(default_factory=dict)

    @property
    def dims(self) -> tuple[int, int, int]:
        c = self.model.cfg
        return c.n, c.p, c.q

    def check_dataset(self, ds: WindowedDataset) -> None:
        n, p, q = self.dims
        if (ds.n, ds.p, ds.q) != (n, p, q):
            raise ShapeError(f"checkpoint expects N={n}, P={p}, Q={q}; data has N={ds.n}, P={ds.p}, Q={ds.q}")

    def predict(self, ds: WindowedDataset, batch_size: int = 1024) -> ForecastOutput:
        """Normalized-space forecasts for every window, in order."""
        self.check_dataset(ds)
        means, logits = [], []
        for i in range(0, len(ds), batch_size):
            out, _ = batch_forward(self.model, ds.x[i: i + batch_size])
            means.append(out.mean)
            logits.append(out.logits)
        if not means:
            k = self.bank.K
            return ForecastOutput(np.zeros((0, ds.n, ds.q)), np.zeros((0, k)), np.zeros((0, k)))
        lg = np.concatenate(logits)
        return ForecastOutput(np.concatenate(means), lg, softmax(lg))

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "model_config": self.model.cfg.to_dict(),
            "params": {k: v.tolist() for k, v in sorted(self.model.arrays.items())},
            "bank": {k: v.tolist() for k, v in bank_to_arrays(self.bank).items()},
            "norm": self.norm.to_dict(),
            "data": self.data,
            "train_config": self.train_config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        version = str(d.get("format_version", ""))
        if version.split(".")[0] != FORMAT_VERSION.split(".")[0]:
            raise CheckpointVersionError(f"checkpoint format {version!r} is incompatible with {FORMAT_VERSION}")
        cfg = ModelConfig(**d["model_config"])
        params = ModelParams(cfg, {k: np.asarray(v, dtype=np.float64) for k, v in d["params"].items()})
        b = d["bank"]
        k = cfg.k
        bank = bank_from_arrays(
            np.asarray(b["spatial_lower"], dtype=np.float64).reshape(k, -1),
            np.asarray(b["spatial_log_diag"], dtype=np.float64),
            np.asarray(b["temporal_lower"], dtype=np.float64).reshape(k, -1),
            np.asarray(b["temporal_log_diag"], dtype=np.float64),
        )
        if bank.shape != (cfg.n, cfg.q) or bank.K != cfg.k:
            raise ShapeError(f"bank (K={bank.K}, N, Q={bank.shape}) does not match model config")
        return cls(params, bank, NormStats.from_dict(d["norm"]), d.get("data", {}), d.get("train_config", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))
