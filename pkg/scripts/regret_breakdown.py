"""Per-segment loss of dnh versus static on one config, averaged over seeds.

Shows where the adaptive hierarchy gains or loses relative to the static
baseline: right after each boundary versus inside stable stretches.

    python scripts/regret_breakdown.py configs/drifting_linear.toml
"""

import argparse

import numpy as np

from dnh import config as cfgmod
from dnh.experiments import NUM_SEEDS, compare_configs, run_one
from dnh.metrics import segment_comparator
from dnh.streams import make_stream


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--head", type=int, default=200, help="steps counted as post-boundary")
    args = ap.parse_args()
    cfg = cfgmod.load(args.config)
    seg = cfg.stream.segment_len
    n_seg = cfg.steps // seg
    rows = {"dnh": np.zeros((n_seg, 3)), "static": np.zeros((n_seg, 3))}
    for c in compare_configs(cfg):
        r = run_one(c)
        stream = make_stream(c.stream)
        oracle = segment_comparator([next(stream) for _ in range(c.steps)], seg)
        gap = r.log.task_losses - oracle
        for i in range(n_seg):
            g = gap[i * seg:(i + 1) * seg]
            rows[c.mode][i] += [g[: args.head].sum(), g[args.head:].sum(), g.sum()]
    print(f"{'seg':>3} {'dnh head':>9} {'dnh rest':>9} {'stat head':>9} {'stat rest':>9}")
    for i in range(n_seg):
        d, s = rows["dnh"][i] / NUM_SEEDS, rows["static"][i] / NUM_SEEDS
        print(f"{i:>3} {d[0]:9.2f} {d[1]:9.2f} {s[0]:9.2f} {s[1]:9.2f}")
    tot_d, tot_s = rows["dnh"].sum(0) / NUM_SEEDS, rows["static"].sum(0) / NUM_SEEDS
    print(f"all {tot_d[0]:9.2f} {tot_d[1]:9.2f} {tot_s[0]:9.2f} {tot_s[1]:9.2f}")


if __name__ == "__main__":
    main()
