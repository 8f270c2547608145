"""Command-line entry point.

Exit codes: 0 success, 1 check failure, 2 configuration error, 3 numeric
failure. Every command writes only inside ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import config as cfgmod
from .config import ExperimentConfig, config_hash
from .experiments import SWEEPABLE, compare, default_jobs, sweep
from .gradcheck import run_all
from .harness import run_experiment
from .numerics import ConfigError, NumericDomainError
from .streams import dump_csv

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _load(args) -> ExperimentConfig:
    cfg = cfgmod.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "steps", None) is not None:
        if args.steps < 1:
            raise ConfigError("--steps must be positive")
        cfg = replace(cfg, total_steps=args.steps)
    cfg.validate()
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def cmd_run(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    try:
        log = run_experiment(cfg)
        code = EXIT_OK
    except NumericDomainError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        log = getattr(exc, "log", None)
        if log is None:
            return EXIT_NUMERIC
        code = EXIT_NUMERIC
    _write(out / "metrics.csv", log.to_csv())
    _write(out / "summary.json", log.summary_json() + "\n")
    s = log.summary()
    print(f"config_hash={config_hash(cfg)} seed={cfg.seed} steps={s['steps']} "
          f"final_loss={s['final_task_loss_mean500']:.6g} events={len(s['events'])}")
    return code


def _jobs(args) -> int:
    return args.jobs if args.jobs is not None else default_jobs()


def _write_compare(out: Path, report: dict, results, prefix: str = "") -> None:
    for r in results:
        h = r.log.header
        _write(out / f"{prefix}{h['mode']}_seed{h['seed']}.csv", r.log.to_csv())
    _write(out / f"{prefix}report.json", json.dumps(report, indent=1, sort_keys=True) + "\n")
    buf = io.StringIO()
    buf.write(f"# config_hash={report['config_hash']} seeds={report['seeds']}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "mean_L_t_dnh", "mean_L_t_static"])
    stride = report["mean_L_t_stride"]
    for i, (a, b) in enumerate(zip(report["dnh"]["mean_L_t"], report["static"]["mean_L_t"])):
        w.writerow([i * stride, repr(a), repr(b)])
    _write(out / f"{prefix}levels.csv", buf.getvalue())
    buf = io.StringIO()
    buf.write(f"# config_hash={report['config_hash']} seeds={report['seeds']}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "step", "kind", "level", "via", "interior"])
    for seed, evs in zip(report["seeds"], report["dnh"]["events"]):
        for e in evs:
            w.writerow([seed, e["step"], e["kind"], e["level"], e["via"], e["interior"]])
    _write(out / f"{prefix}events.csv", buf.getvalue())


def cmd_compare(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    try:
        report, results = compare(cfg, jobs=_jobs(args))
    except NumericDomainError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _write_compare(out, report, results)
    d, s = report["dnh"], report["static"]
    print(f"config_hash={report['config_hash']} seeds={report['seeds']}")
    print(f"regret ratio (dnh/static) {report['regret_ratio']:.4f}; "
          f"segment-comparator ratio {report['segment_regret_ratio']:.4f}; "
          f"cumulative-loss ratio {report['cumulative_loss_ratio']:.4f}")
    for name, m in (("dnh", d), ("static", s)):
        print(f"{name:>6}: AA {m['aa']['mean']:.5g} +- {m['aa']['std']:.2g}  "
              f"BWT {m['bwt']['mean']:.5g} +- {m['bwt']['std']:.2g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        print("--trials must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    results = run_all(seed=args.seed or 0, trials=args.trials, corrupt=args.corrupt)
    failed = [r for r in results if not r.ok]
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: worst error {r.worst:.3e} "
              f"(tol {r.tol:.0e}, {r.trials} trials)")
    if failed:
        print("failing: " + ", ".join(r.name for r in failed), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def _parse_values(text: str) -> list:
    vals = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            vals.append(int(tok) if tok.lstrip("-").isdigit() else float(tok))
        except ValueError as exc:
            raise ConfigError(f"bad sweep value {tok!r}") from exc
    if not vals:
        raise ConfigError("--values is empty")
    return vals


def cmd_sweep(args) -> int:
    if args.param not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {args.param!r}; choose from {sorted(SWEEPABLE)}")
    values = _parse_values(args.values)
    cfg = _load(args)
    out = _out_dir(args)
    try:
        rows = sweep(cfg, args.param, values, jobs=_jobs(args))
    except NumericDomainError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    seeds = [cfg.seed + i for i in range(3)]
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash(cfg)} seeds={seeds} param={args.param}\n")
    cols = list(rows[0])
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    _write(out / "sweep.csv", buf.getvalue())
    _write(out / "sweep.json", json.dumps({"schema": 1, "config_hash": config_hash(cfg),
                                           "seeds": seeds, "param": args.param, "rows": rows},
                                          indent=1, sort_keys=True) + "\n")
    print(buf.getvalue(), end="")
    return EXIT_OK


def cmd_dump_stream(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    path = out / "stream.csv"
    tmp = path.with_name("stream.csv.tmp")
    n = dump_csv(cfg.stream, tmp, steps=cfg.steps, comment=f"config_hash={config_hash(cfg)}")
    tmp.replace(path)
    print(f"wrote {n} rows to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dnh", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, out=True, jobs=False):
        if config:
            p.add_argument("--config", required=True, help="experiment TOML file")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--steps", type=int, default=None, help="override total_steps")
        if jobs:
            p.add_argument("--jobs", type=int, default=None,
                           help="parallel jobs (default: $DNH_JOBS or 1)")

    p = sub.add_parser("run", help="run one experiment")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="dnh vs static over three seeds")
    common(p, jobs=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="compare across values of one parameter")
    common(p, jobs=True)
    p.add_argument("--param", required=True, help=f"one of {', '.join(sorted(SWEEPABLE))}")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dump-stream", help="write the configured stream as CSV")
    common(p)
    p.set_defaults(func=cmd_dump_stream)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
