"""Forecasting network: shared trunk plus a mean head and a mixture-weight head.

The trunk flattens ``X`` (N x P) and runs a fully connected stack. Each head
is a small MLP on the trunk output: the mean head ends without activation and
is reshaped to N x Q, the weight head emits K logits that are softmaxed.
Gradients are hand-written reverse mode over batched numpy arrays.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .linalg import ShapeError
from .mixloss import softmax

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelConfig:
    n: int
    p: int
    q: int
    k: int
    hidden_width: int = 64
    hidden_depth: int = 2
    activation: str = "relu"
    head_width: int = 64
    head_depth: int = 1

    def __post_init__(self):
        for name in ("n", "p", "q", "k", "hidden_width", "hidden_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.head_depth < 0 or self.head_width < 1:
            raise ValueError("head_depth must be >= 0 and head_width >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForecastOutput:
    mean: np.ndarray
    logits: np.ndarray
    weights: np.ndarray


def _act(name: str, x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) if name == "relu" else np.tanh(x)


def _act_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    return (pre > 0).astype(np.float64) if name == "relu" else 1.0 - post * post


def _stack_dims(cfg: ModelConfig) -> dict[str, list[int]]:
    trunk = [cfg.n * cfg.p] + [cfg.hidden_width] * cfg.hidden_depth
    head = [cfg.hidden_width] + [cfg.head_width] * cfg.head_depth
    return {"trunk": trunk, "mean": head + [cfg.n * cfg.q], "weight": head + [cfg.k]}


class MLPTrunk:
    """Fully connected trunk; every layer is followed by the activation.

    Alternative trunks need the same three methods and must name their
    arrays under the ``trunk.`` prefix.
    """

    def __init__(self, dims: list[int], activation: str):
        self.dims = dims
        self.activation = activation

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        return _layer_shapes("trunk", self.dims)

    def forward(self, arrays, x):
        return _mlp_forward(arrays, "trunk", len(self.dims) - 1, x, self.activation, final_act=True)

    def backward(self, arrays, cache, d_out, grads):
        return _mlp_backward(arrays, "trunk", cache, d_out, self.activation, grads, final_act=True)


def _layer_shapes(prefix: str, dims: list[int]) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        shapes[f"{prefix}.{i}.W"] = (fan_in, fan_out)
        shapes[f"{prefix}.{i}.b"] = (fan_out,)
    return shapes


def _mlp_forward(arrays, prefix, nlayers, x, activation, final_act):
    cache = [x]
    h = x
    for i in range(nlayers):
        pre = h @ arrays[f"{prefix}.{i}.W"] + arrays[f"{prefix}.{i}.b"]
        last = i == nlayers - 1
        h = _act(activation, pre) if (final_act or not last) else pre
        cache.append((pre, h))
    return h, cache


def _mlp_backward(arrays, prefix, cache, d_out, activation, grads, final_act):
    nlayers = len(cache) - 1
    d = d_out
    for i in reversed(range(nlayers)):
        pre, post = cache[i + 1]
        if final_act or i != nlayers - 1:
            d = d * _act_grad(activation, pre, post)
        inp = cache[0] if i == 0 else cache[i][1]
        grads[f"{prefix}.{i}.W"] = inp.T @ d
        grads[f"{prefix}.{i}.b"] = d.sum(axis=0)
        d = d @ arrays[f"{prefix}.{i}.W"].T
    return d


class ModelParams:
    """Named parameter arrays for the trunk and both heads."""

    def __init__(self, cfg: ModelConfig, arrays: dict[str, np.ndarray]):
        self.cfg = cfg
        dims = _stack_dims(cfg)
        self.trunk = MLPTrunk(dims["trunk"], cfg.activation)
        expected = self.trunk.layer_shapes()
        expected.update(_layer_shapes("mean", dims["mean"]))
        expected.update(_layer_shapes("weight", dims["weight"]))
        if set(arrays) != set(expected):
            raise ShapeError(f"parameter names mismatch: missing {sorted(set(expected) - set(arrays))}, "
                             f"unexpected {sorted(set(arrays) - set(expected))}")
        self.arrays = {}
        for name, shape in expected.items():
            a = np.array(arrays[name], dtype=np.float64)
            if a.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contains non-finite values")
            self.arrays[name] = a

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> "ModelParams":
        rng = np.random.default_rng(seed)
        dims = _stack_dims(cfg)
        arrays = {}
        for prefix in ("trunk", "mean", "weight"):
            for name, shape in _layer_shapes(prefix, dims[prefix]).items():
                fan_in = shape[0] if len(shape) == 2 else arrays[name[:-1] + "W"].shape[0]
                bound = 1.0 / np.sqrt(fan_in)
                arrays[name] = rng.uniform(-bound, bound, size=shape)
        return cls(cfg, arrays)

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "ModelParams":
        shapes = dict(ModelParams.init(cfg, 0).arrays)
        return cls(cfg, {k: np.zeros_like(v) for k, v in shapes.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.arrays.items()})


def _flat_input(cfg: ModelConfig, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] != (cfg.n, cfg.p):
        raise ShapeError(f"input window shape {x.shape[-2:]} does not match (N, P) = {(cfg.n, cfg.p)}")
    return x.reshape(x.shape[0], cfg.n * cfg.p)


def batch_forward(params: ModelParams, x):
    """Forward pass on (B, N, P) inputs; returns the output and a cache for ``batch_backward``."""
    cfg = params.cfg
    flat = _flat_input(cfg, x)
    a = params.arrays
    hidden, trunk_cache = params.trunk.forward(a, flat)
    nmean = cfg.head_depth + 1
    mean_flat, mean_cache = _mlp_forward(a, "mean", nmean, hidden, cfg.activation, final_act=False)
    logits, weight_cache = _mlp_forward(a, "weight", nmean, hidden, cfg.activation, final_act=False)
    out = ForecastOutput(mean_flat.reshape(-1, cfg.n, cfg.q), logits, softmax(logits))
    return out, (trunk_cache, mean_cache, weight_cache)


def batch_backward(params: ModelParams, cache, d_mean, d_logits) -> dict[str, np.ndarray]:
    cfg = params.cfg
    d_mean = np.asarray(d_mean, dtype=np.float64)
    d_logits = np.asarray(d_logits, dtype=np.float64)
    batch = cache[0][0].shape[0]
    if d_mean.shape != (batch, cfg.n, cfg.q):
        raise ShapeError(f"mean gradient shape {d_mean.shape} does not match {(batch, cfg.n, cfg.q)}")
    if d_logits.shape != (batch, cfg.k):
        raise ShapeError(f"logit gradient shape {d_logits.shape} does not match {(batch, cfg.k)}")
    trunk_cache, mean_cache, weight_cache = cache
    a = params.arrays
    grads: dict[str, np.ndarray] = {}
    dh = _mlp_backward(a, "mean", mean_cache, d_mean.reshape(batch, -1), cfg.activation, grads, final_act=False)
    dh = dh + _mlp_backward(a, "weight", weight_cache, d_logits, cfg.activation, grads, final_act=False)
    params.trunk.backward(a, trunk_cache, dh, grads)
    return grads


def forward(params: ModelParams, x) -> ForecastOutput:
    out, _ = batch_forward(params, np.asarray(x, dtype=np.float64)[None])
    return ForecastOutput(out.mean[0], out.logits[0], out.weights[0])


def backward(params: ModelParams, x, d_mean, d_logits) -> dict[str, np.ndarray]:
    """Parameter gradients for one window given upstream d/dM and d/dlogits."""
    _, cache = batch_forward(params, np.asarray(x, dtype=np.float64)[None])
    return batch_backward(params, cache, np.asarray(d_mean)[None], np.asarray(d_logits)[None])
