"""Central finite-difference oracles shared by the gradient tests."""

import numpy as np

from kronmix.mixloss import bank_from_arrays, bank_to_arrays, batch_loss, total_loss
from kronmix.model import ModelParams, batch_backward, batch_forward

STEP = 1e-5
BANK_KEYS = ("spatial_lower", "spatial_log_diag", "temporal_lower", "temporal_log_diag")


def central_diff(f, x, step=STEP):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        fp = f(x)
        x[idx] = orig - step
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * step)
    return g


def loss_fd_gradients(y, m, bank, logits, cfg):
    """Numerical gradients of total_loss for every parameter class, keyed like LossGrad fields."""
    out = {
        "mean": central_diff(lambda mm: total_loss(y, mm, bank, logits, cfg), m),
        "logits": central_diff(lambda lg: total_loss(y, m, bank, lg, cfg), logits),
    }
    arrays = bank_to_arrays(bank)
    for key in BANK_KEYS:
        def f(v, key=key):
            a = dict(arrays)
            a[key] = v
            return total_loss(y, m, bank_from_arrays(*(a[k] for k in BANK_KEYS)), logits, cfg)

        out[key] = central_diff(f, arrays[key])
    return out


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-8):
    """Entrywise relative error <= rtol; atol only guards entries whose true value is ~0."""
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def network_loss_and_grad(params, bank_arrays, x, y, cfg):
    """Batch total loss of the full model and its gradient on every network and bank array."""
    bank = bank_from_arrays(*(bank_arrays[k] for k in BANK_KEYS))
    out, cache = batch_forward(params, x)
    bl = batch_loss(y, out.mean, bank, out.logits, cfg)
    grads = batch_backward(params, cache, bl.grad.mean, bl.grad.logits)
    grads.update({"bank." + k: getattr(bl.grad, k) for k in BANK_KEYS})
    return bl.total, grads


def directional_check(params, bank_arrays, x, y, cfg, rng, eps=1e-5):
    """Return (finite-difference slope, analytic <grad, d>) along a random unit direction."""
    _, grads = network_loss_and_grad(params, bank_arrays, x, y, cfg)
    names = sorted(grads)
    d = {k: rng.standard_normal(grads[k].shape) for k in names}
    norm = np.sqrt(sum(np.sum(v * v) for v in d.values()))
    d = {k: v / norm for k, v in d.items()}

    def at(sign):
        arrays = {k: params.arrays[k] + sign * eps * d[k] for k in params.arrays}
        bank = {k: bank_arrays[k] + sign * eps * d["bank." + k] for k in BANK_KEYS}
        return network_loss_and_grad(ModelParams(params.cfg, arrays), bank, x, y, cfg)[0]

    numeric = (at(1.0) - at(-1.0)) / (2 * eps)
    analytic = sum(float(np.sum(grads[k] * d[k])) for k in names)
    return numeric, analytic
