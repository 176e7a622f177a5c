"""Calibration report for the simulator's covariate and stake paths.

Prints the statistics the default SimConfig is tuned to: mean goals per
match, closed-market share, Gini mean/sd, xg_diff sd and the zero-stake
share on open minutes.

Usage:
    python scripts/calibrate_simulator.py --matches 1000 --seed 0
"""

import argparse

import numpy as np

from stakessm.data import build_corpus, prepare_spec
from stakessm.params import X2_NAMES, Z_NAMES
from stakessm.simulate import SimConfig, simulate_corpus

TARGETS = {"goals": (2.32, 0.1), "closed_share": (0.098, 0.015), "gini_mean": (0.45, None),
           "xg_diff_sd": (0.71, None), "zero_share": (0.094, 0.003)}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--matches", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    sim = simulate_corpus(SimConfig(n_matches=args.matches, seed=args.seed))
    recs = sim.records
    n = np.array([r.retained_length for r in recs])
    spec = prepare_spec(recs, "full")
    corpus = build_corpus(recs, spec)
    opened = np.concatenate([s.open for s in corpus])
    gini = np.concatenate([s.z[:, Z_NAMES.index("gini")] for s in corpus])[opened]
    xg = np.concatenate([s.x2[:, X2_NAMES.index("xg_diff")] for s in corpus])
    y = np.concatenate([s.y for s in corpus])
    stats = {
        "goals": np.mean([len(r.goal_events()) for r in recs]),
        "closed_share": sum(np.sum(~r.open[:k]) for r, k in zip(recs, n)) / n.sum(),
        "gini_mean": gini.mean(),
        "xg_diff_sd": xg.std(),
        "zero_share": np.mean(y[opened] == 0),
    }
    for k, v in stats.items():
        target, tol = TARGETS[k]
        band = f"+/- {tol}" if tol else "(soft)"
        print(f"{k:14s} {v:8.4f}   target {target} {band}")
    print(f"gini sd {gini.std():.4f}, max {gini.max():.4f}")
    print(f"stake_avg_team mean {np.mean(list(spec.team_stake_avg.values())):.3f}")


if __name__ == "__main__":
    main()
