"""Print the level count and frequencies of one dnh run at a coarse stride.

    python scripts/level_trajectory.py configs/drifting_linear.toml --every 1000
"""

import argparse

from dnh import config as cfgmod
from dnh.harness import run_experiment


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--every", type=int, default=1000)
    args = ap.parse_args()
    cfg = cfgmod.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    log = run_experiment(cfg)
    for r in log.records:
        if r.t % args.every == 0 or r.events:
            ev = " ".join(f"{e.kind}@{e.level}" for e in r.events)
            freqs = " ".join(f"{f:.3f}" for f in r.freqs)
            print(f"t={r.t:>6} L={r.L_t} loss={r.task_loss:.4f} freqs=[{freqs}] {ev}")


if __name__ == "__main__":
    main()
