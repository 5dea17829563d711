#!/usr/bin/env python3
"""Maximal-inequality and random-series convergence checks.

Runs the `inequality` experiment (exhaustive when the window is narrow
enough and the distribution is two-valued, Monte Carlo otherwise) and the
`series` tail-convergence experiment for the same site distribution.
"""

import argparse
import json
import os
import tempfile

from jacobilab.harness import main as lab_main


def run_one(experiment, cfg, out):
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as f:
        json.dump(cfg, f)
        cfg_path = f.name
    try:
        return lab_main([experiment, "--config", cfg_path, "--out", out])
    finally:
        os.unlink(cfg_path)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--kind", default="rademacher",
                        choices=["uniform", "rademacher", "tgauss"])
    parser.add_argument("--amplitude", type=float, default=1.0)
    parser.add_argument("--decay", type=float, default=1.0)
    parser.add_argument("--n1", type=int, default=1)
    parser.add_argument("--n2", type=int, default=10)
    parser.add_argument("--r", type=float, default=3.0)
    parser.add_argument("--trials", type=int, default=10 ** 4)
    parser.add_argument("--out", default="out/inequality")
    args = parser.parse_args()

    model = {"b": {"kind": args.kind, "amplitude": args.amplitude,
                   "decay": args.decay}}
    rc = run_one("inequality", {
        "model": model,
        "grids": {"N1": args.n1, "N2": args.n2, "r": args.r,
                  "trials": args.trials},
    }, os.path.join(args.out, "inequality"))
    if rc != 0:
        return rc
    return run_one("series", {
        "model": model,
        "grids": {"trials": args.trials, "n_tail": 100, "n_max": 10 ** 4},
    }, os.path.join(args.out, "series"))


if __name__ == "__main__":
    raise SystemExit(main())
