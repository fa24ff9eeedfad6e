"""Model-selection consistency: how often BIC picks the generating (K, S).

Usage: python scripts/model_grid.py [--reps 50] [--n 2000] [--seed 0] [--out results/model_grid]
"""
import argparse
import collections
import json
import logging
from pathlib import Path

from gmtmm.engine import FitControls, simulate
from gmtmm.metrics import model_grid
from gmtmm.presets import selection_design, selection_truth


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--reps", type=int, default=50)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--K", type=int, nargs="+", default=[2, 3, 4])
    ap.add_argument("--S", type=int, nargs="+", default=[1, 2])
    ap.add_argument("--n-starts", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/model_grid")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth, design = selection_truth(), selection_design()
    picks, grids = [], []
    for rep in range(args.reps):
        data = simulate(truth, design, args.n, seed=10_000 + args.seed + rep)
        g = model_grid(data, design, args.K, args.S, controls=FitControls(information=False),
                       n_starts=args.n_starts, seed=args.seed + rep)
        best = g.best()
        picks.append((best["K"], best["S"]))
        grids.append(g.to_dict())
        logging.info("replicate %d selects K=%d S=%d", rep, *picks[-1])
    counts = collections.Counter(picks)
    lines = [f"K={k} S={s}: {c} of {args.reps}" for (k, s), c in sorted(counts.items())]
    print("\n".join(lines))
    (out / "selection.txt").write_text("\n".join(lines) + "\n")
    (out / "grids.json").write_text(json.dumps({"picks": picks, "grids": grids}, indent=2, default=float))


if __name__ == "__main__":
    main()
