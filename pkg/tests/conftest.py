import json
from pathlib import Path

import numpy as np
import pytest
from scipy.special import logsumexp as sp_logsumexp
from scipy.stats import multivariate_normal

from kronmix.linalg import CholFactor, materialize
from kronmix.matnorm import MatnormComponent
from kronmix.mixloss import MixtureBank

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def load_config(name: str) -> dict:
    return json.loads((CONFIGS / name).read_text())


def random_factor(rng, dim, scale=0.4):
    return CholFactor(dim, scale * rng.standard_normal(dim * (dim - 1) // 2), scale * rng.standard_normal(dim))


def random_component(rng, n, q, scale=0.4):
    return MatnormComponent(random_factor(rng, n, scale), random_factor(rng, q, scale))


def random_bank(rng, n, q, k, scale=0.4):
    return MixtureBank(tuple(random_component(rng, n, q, scale) for _ in range(k)))


# Dense oracles: generic inverse + scipy MVN on the column-stacked residual.
def dense_covariance(comp):
    ln, lq = materialize(comp.spatial), materialize(comp.temporal)
    sig_n = np.linalg.inv(ln @ ln.T)
    sig_q = np.linalg.inv(lq @ lq.T)
    return np.kron(sig_q, sig_n)


def dense_log_density(comp, r):
    cov = dense_covariance(comp)
    return multivariate_normal(mean=np.zeros(cov.shape[0]), cov=cov).logpdf(np.asarray(r).flatten(order="F"))


def dense_log_joints(bank, logits, r):
    logits = np.asarray(logits, dtype=float)
    log_w = logits - sp_logsumexp(logits)
    return np.array([lw + dense_log_density(c, r) for lw, c in zip(log_w, bank.components)])


def dense_mixture_nll(bank, logits, r):
    return -sp_logsumexp(dense_log_joints(bank, logits, r))


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion_report():
    def report(number: int, name: str, passed: bool, detail: str = ""):
        line = f"[acceptance {number}] {'PASS' if passed else 'FAIL'}  {name}  {detail}".rstrip()
        _ACCEPTANCE_LINES.append(line)
        print(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
