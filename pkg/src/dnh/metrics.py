"""Run-level metrics: hindsight comparator, regret, gradient-norm trend,
task-matrix summaries and replica frequency variance."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import ConfigError, InsufficientDataError, ShapeError

RIDGE = 1e-8


class RankDeficientWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ComparatorResult:
    losses: np.ndarray
    matrix: np.ndarray
    regularized: bool = False


def _stack(stream) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for s in stream:
        xs.append(s.x)
        ys.append(s.target)
    if not xs:
        raise InsufficientDataError("empty stream")
    return np.asarray(xs), np.asarray(ys)


def fit_fixed_predictor(xs: np.ndarray, ys: np.ndarray) -> ComparatorResult:
    """Least-squares ``W`` minimizing ``sum 0.5 ||W x - y||^2`` over the rows.

    A rank-deficient design falls back to ridge ``1e-8`` and is flagged.
    """
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    if xs.ndim != 2 or ys.shape[0] != xs.shape[0]:
        raise ShapeError("inputs and targets must have matching rows")
    gram = xs.T @ xs
    regularized = np.linalg.matrix_rank(gram) < gram.shape[0]
    if regularized:
        warnings.warn("rank-deficient comparator fit; using ridge", RankDeficientWarning,
                      stacklevel=2)
        gram = gram + RIDGE * np.eye(gram.shape[0])
    w = np.linalg.solve(gram, xs.T @ ys).T
    r = xs @ w.T - ys
    return ComparatorResult(0.5 * np.sum(r * r, axis=1), w, regularized)


def hindsight_comparator(stream, d: int | None = None) -> ComparatorResult:
    """Per-step losses of the best single fixed linear predictor in hindsight."""
    xs, ys = _stack(stream)
    if d is not None and xs.shape[1] != d:
        raise ShapeError(f"stream dimension {xs.shape[1]} differs from d={d}")
    return fit_fixed_predictor(xs, ys)


def segment_comparator(stream, segment_len: int) -> np.ndarray:
    """Per-step losses of a separate least-squares fit on every segment."""
    xs, ys = _stack(stream)
    out = np.empty(len(xs))
    for a in range(0, len(xs), segment_len):
        b = min(a + segment_len, len(xs))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankDeficientWarning)
            out[a:b] = fit_fixed_predictor(xs[a:b], ys[a:b]).losses
    return out


def cumulative_regret(losses, oracle) -> np.ndarray:
    """Prefix sums of ``loss_t - oracle_t``. ``losses`` may be a MetricsLog."""
    losses = np.asarray(getattr(losses, "task_losses", losses), dtype=np.float64)
    oracle = np.asarray(oracle, dtype=np.float64)
    if losses.shape != oracle.shape:
        raise ShapeError(f"length mismatch: {losses.shape} vs {oracle.shape}")
    return np.cumsum(losses - oracle)


def running_mean(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return np.cumsum(a) / np.arange(1, len(a) + 1)


def grad_norm_trend(log, skip: int = 0) -> tuple[float, float]:
    """Slope and intercept of log(running mean of grad_norm_sq) vs log(t).

    ``t`` counts from 1. ``skip`` drops the first points from the fit (the
    running mean is still accumulated from the start).
    """
    g = np.asarray(getattr(log, "grad_norm_sq", log), dtype=np.float64)
    if len(g) - skip < 10:
        raise InsufficientDataError("need at least 10 points for a trend")
    rm = running_mean(g)[skip:]
    t = np.arange(1, len(g) + 1)[skip:]
    if np.any(rm <= 0):
        raise InsufficientDataError("running mean must be positive to take logs")
    slope, intercept = np.polyfit(np.log(t), np.log(rm), 1)
    return float(slope), float(intercept)


def aa_bwt(tm, higher_is_better: bool = False) -> tuple[float, float]:
    """Average performance after the last task and backward transfer.

    For loss-valued matrices (the default) entries are negated first, so a
    negative BWT always means forgetting.
    """
    tm = np.asarray(tm, dtype=np.float64)
    if tm.ndim != 2 or tm.shape[0] != tm.shape[1]:
        raise ShapeError("task matrix must be square")
    n = tm.shape[0]
    if n < 2:
        raise InsufficientDataError("need at least two tasks")
    perf = tm if higher_is_better else -tm
    aa = float(np.mean(perf[-1]))
    bwt = float(np.mean([perf[-1, j] - perf[j, j] for j in range(n - 1)]))
    if not higher_is_better:
        aa = -aa  # report AA in the matrix's own units
    return aa, bwt


def freq_variance_across_replicas(logs: Sequence, level: int) -> tuple[np.ndarray, np.ndarray]:
    """Logged times and the across-replica sample variance of ``f^(level)``.

    Replicas must share their config up to the seed. Only steps logged by
    every replica are used, and steps where a replica lacks the level are
    dropped.
    """
    if len(logs) < 3:
        raise InsufficientDataError("need at least three replicas")
    ref = _config_sans_seed(logs[0])
    for lg in logs[1:]:
        if _config_sans_seed(lg) != ref:
            raise ConfigError("replica configs differ beyond the seed")
    series = [lg.freq_series(level) for lg in logs]
    # event steps are logged per replica; keep the steps every replica logged
    ts = series[0][0]
    for s in series[1:]:
        ts = np.intersect1d(ts, s[0])
    fs = np.vstack([s[1][np.searchsorted(s[0], ts)] for s in series])
    keep = ~np.any(np.isnan(fs), axis=0)
    return ts[keep], np.var(fs[:, keep], axis=0, ddof=1)


def linear_growth_fit(ts, values) -> dict:
    """Fit ``v = a + b t`` and ``v = a + b t + c t^2``.

    Returns the slope, its standard error, and the quadratic coefficient with
    its standard error, so callers can test for superlinear growth.
    """
    ts = np.asarray(ts, float)
    v = np.asarray(values, float)
    if len(ts) < 4:
        raise InsufficientDataError("need at least four points")
    s = ts / ts.max()  # conditioning

    def ols(cols):
        x = np.column_stack(cols)
        coef, *_ = np.linalg.lstsq(x, v, rcond=None)
        resid = v - x @ coef
        dof = max(len(v) - x.shape[1], 1)
        sigma2 = float(resid @ resid) / dof
        cov = sigma2 * np.linalg.pinv(x.T @ x)
        return coef, np.sqrt(np.maximum(np.diag(cov), 0.0))

    c1, se1 = ols([np.ones_like(s), s])
    c2, se2 = ols([np.ones_like(s), s, s * s])
    scale = ts.max()
    return {
        "slope": float(c1[1] / scale),
        "slope_se": float(se1[1] / scale),
        "quad": float(c2[2] / scale**2),
        "quad_se": float(se2[2] / scale**2),
    }


def _config_sans_seed(log) -> dict:
    cfg = dict(log.header["config"])
    cfg.pop("seed", None)
    stream = dict(cfg.get("stream", {}))
    stream.pop("seed", None)
    cfg["stream"] = stream
    return cfg
