"""DNH-versus-static comparisons and parameter sweeps over seeds.

Every (config, seed, mode) run is an independent job; jobs fan out over a
process pool and results are aggregated after all of them finish.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .config import ExperimentConfig, config_hash
from .harness import MetricsLog, run_experiment
from .metrics import (
    RankDeficientWarning,
    aa_bwt,
    cumulative_regret,
    hindsight_comparator,
    segment_comparator,
)
from .numerics import ConfigError
from .streams import make_stream

REPORT_SCHEMA = 1
NUM_SEEDS = 3
SWEEPABLE = {"delta_threshold": "meta", "gamma": "meta", "eta_f": "meta", "l_max": None}
JOBS_ENV = "DNH_JOBS"


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class RunResult:
    """What a compare job returns: the log plus both regret sequences' ends."""

    log: MetricsLog
    regret: float
    segment_regret: float
    cumulative_loss: float


def run_one(cfg: ExperimentConfig) -> RunResult:
    log = run_experiment(cfg)
    stream = make_stream(cfg.stream)
    samples = [next(stream) for _ in range(cfg.steps)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficientWarning)
        oracle = hindsight_comparator(samples, cfg.d).losses
    seg = segment_comparator(samples, cfg.stream.segment_len)
    return RunResult(
        log,
        float(cumulative_regret(log, oracle)[-1]),
        float(cumulative_regret(log, seg)[-1]),
        float(np.sum(log.task_losses)),
    )


def map_jobs(fn, items, jobs: int) -> list:
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(a) for a in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as ex:
        return list(ex.map(fn, items))


def compare_configs(cfg: ExperimentConfig, num_seeds: int = NUM_SEEDS) -> list[ExperimentConfig]:
    """The dnh and static runs of one comparison, seeds ``seed .. seed+n-1``."""
    base = replace(cfg, task_matrix=True)
    out = []
    for i in range(num_seeds):
        c = base.with_seed(cfg.seed + i)
        out += [replace(c, mode="dnh"), replace(c, mode="static")]
    return out


def ratio(num: float, den: float) -> float:
    if den == 0.0:
        return 1.0 if num == 0.0 else math.copysign(math.inf, num)
    return num / den


def _mean_std(xs) -> dict:
    a = np.asarray(xs, float)
    return {"mean": float(a.mean()), "std": float(a.std())}


def build_report(cfg: ExperimentConfig, results: list[RunResult], stride: int = 100) -> dict:
    """Aggregate the runs of ``compare_configs(cfg)`` into a report dict."""
    by_mode: dict[str, list[RunResult]] = {"dnh": [], "static": []}
    for r in results:
        by_mode[r.log.header["mode"]].append(r)
    report = {
        "schema": REPORT_SCHEMA,
        "config_hash": config_hash(cfg),
        "seeds": [r.log.header["seed"] for r in by_mode["dnh"]],
        "steps": cfg.steps,
    }
    for mode, rs in by_mode.items():
        aa, bwt = zip(*(aa_bwt(r.log.task_matrix) for r in rs)) if cfg.stream.num_segments >= 2 \
            else ((math.nan,) * len(rs), (math.nan,) * len(rs))
        counts = np.vstack([r.log.level_counts for r in rs]).astype(float)
        report[mode] = {
            "run_hashes": [r.log.header["config_hash"] for r in rs],
            "final_regret": [r.regret for r in rs],
            "final_segment_regret": [r.segment_regret for r in rs],
            "cumulative_loss": [r.cumulative_loss for r in rs],
            "aa": _mean_std(aa),
            "bwt": _mean_std(bwt),
            "mean_L_t": [float(v) for v in counts.mean(0)[::stride]],
            "events": [
                [{"step": e.step, "kind": e.kind, "level": e.level, "via": e.via,
                  "interior": e.interior} for e in r.log.events]
                for r in rs
            ],
        }
    d, s = report["dnh"], report["static"]
    report["regret_ratio"] = ratio(np.mean(d["final_regret"]), np.mean(s["final_regret"]))
    report["segment_regret_ratio"] = ratio(np.mean(d["final_segment_regret"]),
                                           np.mean(s["final_segment_regret"]))
    report["cumulative_loss_ratio"] = ratio(np.mean(d["cumulative_loss"]),
                                            np.mean(s["cumulative_loss"]))
    report["mean_L_t_stride"] = stride
    return report


def compare(cfg: ExperimentConfig, jobs: int = 1, num_seeds: int = NUM_SEEDS) -> tuple[dict, list[RunResult]]:
    results = map_jobs(run_one, compare_configs(cfg, num_seeds), jobs)
    return build_report(cfg, results), results


def sweep_config(cfg: ExperimentConfig, param: str, value) -> ExperimentConfig:
    if param not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {param!r}; choose from {sorted(SWEEPABLE)}")
    if param == "l_max":
        return replace(cfg, l_max=int(value))
    return replace(cfg, meta=replace(cfg.meta, **{param: float(value)}))


def sweep(cfg: ExperimentConfig, param: str, values, jobs: int = 1,
          num_seeds: int = NUM_SEEDS) -> list[dict]:
    """One comparison per value, all runs scheduled in a single pool."""
    cfgs = [sweep_config(cfg, param, v) for v in values]
    for c in cfgs:
        c.validate()
    runs = [compare_configs(c, num_seeds) for c in cfgs]
    flat = map_jobs(run_one, [r for rs in runs for r in rs], jobs)
    n = 2 * num_seeds
    rows = []
    for i, (v, c) in enumerate(zip(values, cfgs)):
        rep = build_report(c, flat[i * n:(i + 1) * n])
        rows.append({
            "value": v,
            "config_hash": rep["config_hash"],
            "regret_ratio": rep["regret_ratio"],
            "segment_regret_ratio": rep["segment_regret_ratio"],
            "aa_dnh": rep["dnh"]["aa"]["mean"],
            "bwt_dnh": rep["dnh"]["bwt"]["mean"],
            "aa_static": rep["static"]["aa"]["mean"],
            "bwt_static": rep["static"]["bwt"]["mean"],
        })
    return rows
