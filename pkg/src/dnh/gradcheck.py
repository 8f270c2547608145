"""Analytic-versus-finite-difference gradient checks.

Shared by the ``gradcheck`` command and the test suite. Each check draws
random instances from a seeded generator and reports the worst relative
error it saw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import hierarchy as hz
from .memory import MemoryModule, MetaNet, level_loss, level_loss_grad, meta_net_data_grad, meta_net_objective
from .meta import MetaParams, fd_frequency_gradient
from .numerics import central_fd, central_fd_matrix

REL_TOL = 1e-5
FREQ_ABS_TOL = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    worst: float
    tol: float
    trials: int

    @property
    def ok(self) -> bool:
        return self.worst < self.tol


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_level_loss_grad(rng: np.random.Generator, trials: int, corrupt: float = 0.0) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(1, 9))
        m = MemoryModule.create(0, 1, rng.standard_normal((d, d)), 1.0)
        x, y = rng.standard_normal(d), rng.standard_normal(d)
        analytic = level_loss_grad(m, x, y) * (1.0 + corrupt)
        numeric = central_fd_matrix(lambda th: level_loss(th, x, y), m.theta)
        worst = max(worst, rel_err(analytic, numeric))
    return CheckResult("level_loss_grad", worst, REL_TOL, trials)


def meta_net_objective_grad(net: MetaNet, k, v, c, theta, beta_reg: float, prev) -> np.ndarray:
    """Gradient of the regularized meta-network objective in ``[psi_w, psi_b]``."""
    anchor = np.concatenate(prev)
    return meta_net_data_grad(net, k, v, c, theta) + 2.0 * beta_reg * (net.flat() - anchor)


def check_meta_net_objective(rng: np.random.Generator, trials: int,
                             corrupt: float = 0.0) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(1, 9))
        k, v, c = (rng.standard_normal(d) for _ in range(3))
        theta = rng.standard_normal((d, d))
        beta = float(rng.uniform(0.0, 2.0))
        prev = (0.3 * rng.standard_normal(3 * d), 0.3 * rng.standard_normal(d))
        net = MetaNet(0.3 * rng.standard_normal(3 * d), 0.3 * rng.standard_normal(d))
        analytic = meta_net_objective_grad(net, k, v, c, theta, beta, prev) * (1.0 + corrupt)
        numeric = central_fd(
            lambda f: meta_net_objective(net.with_flat(f), k, v, c, theta, beta, prev), net.flat())
        worst = max(worst, rel_err(analytic, numeric))
    return CheckResult("meta_net_fit objective", worst, REL_TOL, trials)


def check_planted_frequency(rng: np.random.Generator, trials: int,
                            corrupt: float = 0.0) -> CheckResult:
    """FD frequency gradient on a rollout whose loss is ``a (f - f*)^2``."""
    worst = 0.0
    p = MetaParams(fd_h=0.01)
    for _ in range(trials):
        a, f_star = float(rng.uniform(0.1, 5.0)), float(rng.uniform(0.1, 1.0))
        f = float(rng.uniform(0.2, 0.8))
        h = hz.build([np.eye(2), np.eye(2)], [1.0, f])

        def rollout(hh, samples, gamma=0.0):
            return a * (hh.module(2).freq - f_star) ** 2

        est = fd_frequency_gradient(h, 2, [None], p, rollout).grad * (1.0 + corrupt)
        worst = max(worst, abs(est - 2.0 * a * (f - f_star)))
    return CheckResult("planted frequency quadratic", worst, FREQ_ABS_TOL, trials)


def run_all(seed: int = 0, trials: int = 100, corrupt: float = 0.0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [
        check_level_loss_grad(rng, trials, corrupt),
        check_meta_net_objective(rng, trials, corrupt),
        check_planted_frequency(rng, trials, corrupt),
    ]
