"""The experiment loop and its metrics log."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from . import hierarchy as hz
from .config import ExperimentConfig, OptimizerConfig, config_hash, to_dict
from .hierarchy import Hierarchy, StructuralEvent
from .meta import MetaController, evolve, meta_loss
from .numerics import NumericDomainError, RngState, fast_replace
from .optim import EAdamState, MomentumState, eadam_step, momentum_descent
from .streams import Sample, Stream, make_stream

LOG_SCHEMA = 1
_MODEL_RNG, _META_RNG = 10, 11


# ---------------------------------------------------------------------------
# one training step


@dataclass(frozen=True, eq=False)
class StepInfo:
    task_loss: float
    grads: list  # per level, d x d
    lss: list  # per level, norm of the loss gradient at the level output
    due: set


def make_opt_state(ocfg: OptimizerConfig, d: int):
    if ocfg.kind == "eadam":
        return EAdamState.zeros((d, d), beta1=ocfg.beta1, beta2=ocfg.beta2,
                                sigma2=ocfg.sigma2, eta_beta=ocfg.eta_beta, lr=ocfg.lr,
                                eps=ocfg.eps, bias_correction=ocfg.bias_correction)
    return MomentumState.zeros((d, d), eta=ocfg.momentum_eta, decay=ocfg.momentum_decay)


def apply_update(opt, grad):
    if isinstance(opt, EAdamState):
        return eadam_step(opt, grad)
    return momentum_descent(opt, grad)


def train_step(h: Hierarchy, sample: Sample, ocfg: OptimizerConfig) -> tuple[Hierarchy, StepInfo]:
    """Forward pass, task loss, per-level gradients and updates of due levels.

    Every level's gradient comes from the same forward pass; only due levels
    change their parameters.
    """
    trace = hz.forward(h, sample.x)
    err = trace.output - sample.target
    loss = 0.5 * float(err @ err)
    if not math.isfinite(loss):
        raise NumericDomainError(f"non-finite task loss at step {h.t}")
    _, gouts = hz.backprop_targets(h, trace, sample.target)
    grads = [np.outer(g, c) for g, c in zip(gouts, trace.inputs)]
    lss = [float(np.linalg.norm(g)) for g in gouts]
    due, h = hz.due_modules(h)
    mods = []
    for lvl, (m, c, grad, s) in enumerate(zip(h.modules, trace.inputs, grads, lss), start=1):
        m = fast_replace(m, context=c, last_lss=s)
        if lvl in due:
            opt = m.opt if m.opt is not None else make_opt_state(ocfg, m.dim)
            opt, delta = apply_update(opt, grad)
            m = fast_replace(m, theta=m.theta + delta, opt=opt)
        mods.append(m)
    return h.with_modules(mods), StepInfo(loss, grads, lss, due)


def make_rollout(ocfg: OptimizerConfig, f_min: float, f_max: float):
    """Inner-loop simulator used for finite-difference meta-gradients.

    Trains the given hierarchy on ``samples`` with no structural changes and
    returns the mean pre-update task loss. ``gamma > 0`` lets the surprise
    term move frequencies during the rollout.
    """

    def rollout(h: Hierarchy, samples, gamma: float = 0.0) -> float:
        total = 0.0
        for s in samples:
            h, info = train_step(h, s, ocfg)
            total += info.task_loss
            if gamma > 0:
                h = h.with_modules(
                    fast_replace(m, freq=min(max(m.freq + gamma * l, f_min), f_max))
                    for m, l in zip(h.modules, info.lss)
                )
        return total / len(samples)

    return rollout


def initial_hierarchy(cfg: ExperimentConfig) -> Hierarchy:
    """Outermost level starts at zero, inner levels at the identity."""
    d = cfg.d
    thetas = [np.zeros((d, d))] + [np.eye(d) for _ in range(cfg.l0 - 1)]
    return hz.build(thetas, cfg.level_freqs(), l_max=cfg.l_max, f_min=cfg.meta.f_min,
                    f_max=cfg.meta.f_max, d_max=cfg.d_max)


# ---------------------------------------------------------------------------
# metrics log


@dataclass(frozen=True)
class Record:
    t: int
    task_loss: float
    meta_loss: float
    L_t: int
    freqs: tuple[float, ...]
    grad_norm_sq: float
    shift_estimate: float
    events: tuple[StructuralEvent, ...] = ()


@dataclass
class MetricsLog:
    header: dict
    records: list = field(default_factory=list)
    task_losses: np.ndarray = field(default_factory=lambda: np.zeros(0))
    grad_norm_sq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    level_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    events: list = field(default_factory=list)
    task_matrix: np.ndarray | None = None
    failed_at: int | None = None
    final_hierarchy: Hierarchy | None = None

    @property
    def l_max(self) -> int:
        return int(self.header["l_max"])

    def freq_series(self, level: int) -> tuple[np.ndarray, np.ndarray]:
        """Logged times and frequencies of ``level`` (NaN where absent)."""
        ts = np.array([r.t for r in self.records])
        fs = np.array([r.freqs[level - 1] if len(r.freqs) >= level else np.nan
                       for r in self.records])
        return ts, fs

    def to_csv(self) -> str:
        buf = io.StringIO()
        h = self.header
        buf.write(f"# schema={LOG_SCHEMA} config_hash={h['config_hash']} seed={h['seed']} "
                  f"mode={h['mode']} version={h['code_version']}\n")
        cols = (["t", "task_loss", "meta_loss", "L_t"]
                + [f"freq_{i}" for i in range(1, self.l_max + 1)]
                + ["grad_norm_sq", "shift_estimate", "event"])
        buf.write(",".join(cols) + "\n")
        for r in self.records:
            freqs = [repr(f) for f in r.freqs] + [""] * (self.l_max - len(r.freqs))
            ev = ";".join(_event_str(e) for e in r.events)
            row = ([str(r.t), repr(r.task_loss), repr(r.meta_loss), str(r.L_t)] + freqs
                   + [repr(r.grad_norm_sq), repr(r.shift_estimate), ev])
            buf.write(",".join(row) + "\n")
        return buf.getvalue()

    def summary(self) -> dict:
        n = len(self.task_losses)
        tail = self.task_losses[-min(n, 500):] if n else np.zeros(1)
        out = {
            "schema": LOG_SCHEMA,
            "header": self.header,
            "steps": n,
            "final_task_loss_mean500": float(np.mean(tail)),
            "cumulative_task_loss": float(np.sum(self.task_losses)),
            "final_L_t": int(self.level_counts[-1]) if n else None,
            "mean_L_t": float(np.mean(self.level_counts)) if n else None,
            "events": [_event_dict(e) for e in self.events],
            "failed_at": self.failed_at,
        }
        if self.task_matrix is not None:
            out["task_matrix"] = self.task_matrix.tolist()
        return out

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=1, sort_keys=True)


def _event_str(e: StructuralEvent) -> str:
    return f"{e.kind}@{e.level}"


def _event_dict(e: StructuralEvent) -> dict:
    return {"step": e.step, "kind": e.kind, "level": e.level, "detail": e.detail,
            "interior": e.interior, "via": e.via}


# ---------------------------------------------------------------------------
# the run


def evaluate(h: Hierarchy, xs: np.ndarray, ys: np.ndarray) -> float:
    """Mean task loss of the frozen model on a batch."""
    w = np.eye(h.dim)
    for m in h.modules:
        w = w @ m.theta
    r = xs @ w.T - ys
    return 0.5 * float(np.mean(np.sum(r * r, axis=1)))


def run_experiment(cfg: ExperimentConfig, stream: Stream | None = None) -> MetricsLog:
    cfg.validate()
    stream = stream if stream is not None else make_stream(cfg.stream)
    steps = cfg.steps
    p = cfg.meta
    rng = RngState(cfg.seed)
    ctrl = MetaController.create(p, make_rollout(cfg.optimizer, p.f_min, p.f_max),
                                 rng.spawn(_META_RNG))
    h = initial_hierarchy(cfg)
    header = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "mode": cfg.mode,
        "code_version": __version__,
        "l_max": cfg.l_max,
        "config": to_dict(cfg),
    }
    log = MetricsLog(header)
    losses = np.zeros(steps)
    gsq = np.zeros(steps)
    counts = np.zeros(steps, dtype=int)
    held = None
    seg_len = cfg.stream.segment_len
    if cfg.task_matrix:
        n_seg = cfg.stream.num_segments
        held = [stream.held_out(j, cfg.eval_samples) for j in range(n_seg)]
        tm = np.full((n_seg, n_seg), np.nan)

    done = 0
    # overflow surfaces as a non-finite loss or gradient and is raised below
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            for t in range(steps):
                sample = next(stream)
                h = fast_replace(h, t=t)
                h, info = train_step(h, sample, cfg.optimizer)
                if cfg.mode == "dnh":
                    res = evolve(h, ctrl, sample.x, info.task_loss, info.grads, info.lss, sample)
                    h, ml, evs = res.hierarchy, res.meta_loss, res.events
                    shift, fd_sq = res.shift, res.fd_grad_sq
                else:
                    shift = ctrl.estimator.observe(sample.x)
                    ml, evs, fd_sq = meta_loss(info.task_loss, 0, shift, p), (), 0.0
                g1 = info.grads[0]
                gn = float(np.sum(g1 * g1)) + fd_sq
                if not math.isfinite(gn):
                    raise NumericDomainError(f"non-finite gradient norm at step {t}")
                losses[t], gsq[t], counts[t] = info.task_loss, gn, h.L
                log.events.extend(evs)
                if t % cfg.log_every == 0 or evs or t == steps - 1:
                    log.records.append(Record(t, info.task_loss, ml, h.L, tuple(h.freqs), gn,
                                              shift, tuple(evs)))
                if held is not None and (t + 1) % seg_len == 0:
                    i = (t + 1) // seg_len - 1
                    for j, (xs, ys) in enumerate(held):
                        tm[i, j] = evaluate(h, xs, ys)
                done = t + 1
        except NumericDomainError as exc:
            log.failed_at = done
            exc.log = log  # lets callers write the partial log
            raise
        finally:
            log.task_losses, log.grad_norm_sq, log.level_counts = losses[:done], gsq[:done], counts[:done]
            if held is not None:
                log.task_matrix = tm
    log.final_hierarchy = h
    return log


def static_variant(cfg: ExperimentConfig) -> ExperimentConfig:
    return replace(cfg, mode="static")
