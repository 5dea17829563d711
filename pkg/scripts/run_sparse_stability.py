#!/usr/bin/env python3
"""Sparse-bump envelope stability under power-law decaying noise.

Runs the `sparse` experiment for a geometric bump potential and reports
how far the perturbed envelope exponents move from the unperturbed fit.
"""

import argparse
import json
import os
import tempfile

from jacobilab.harness import main as lab_main


def build_config(args):
    return {
        "spec": {"type": "sparse", "v": args.v, "gamma": args.gamma,
                 "j_max": args.j_max},
        "E_grid": [args.energy],
        "seeds": {"base": 0, "count": args.seeds},
        "grids": {"s": args.s, "n_cut": args.n_cut},
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--v", type=float, default=0.2, help="bump height")
    parser.add_argument("--gamma", type=int, default=8, help="bump spacing base")
    parser.add_argument("--j-max", type=int, default=30, help="number of bumps")
    parser.add_argument("--energy", type=float, default=0.6)
    parser.add_argument("--s", type=float, default=2.0, help="noise decay rate")
    parser.add_argument("--n-cut", type=int, default=10 ** 5,
                        help="dense-noise cutoff site")
    parser.add_argument("--seeds", type=int, default=50)
    parser.add_argument("--out", default="out/sparse")
    parser.add_argument("--workers", type=int, default=None)
    args = parser.parse_args()

    cfg = build_config(args)
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as f:
        json.dump(cfg, f)
        cfg_path = f.name
    argv = ["sparse", "--config", cfg_path, "--out", args.out]
    if args.workers is not None:
        argv += ["--workers", str(args.workers)]
    try:
        return lab_main(argv)
    finally:
        os.unlink(cfg_path)


if __name__ == "__main__":
    raise SystemExit(main())
