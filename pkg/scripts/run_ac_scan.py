#!/usr/bin/env python3
"""Scan an energy grid for bounded Cesàro averages and series membership.

Writes the generated config next to the outputs, then drives the standard
CLI entry point so the emitted files match `lab ac-scan` exactly.
"""

import argparse
import json
import os
import tempfile

from jacobilab.harness import main as lab_main


def build_config(args):
    return {
        "spec": {"type": "free"},
        "model": {"b": {"kind": "uniform", "amplitude": args.amplitude,
                        "decay": args.decay}},
        "E_grid": {"start": args.e_min, "stop": args.e_max,
                   "step": args.e_step},
        "grids": {"N_j_max": args.n_j_max, "n_max": args.n_max},
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--e-min", type=float, default=-2.5)
    parser.add_argument("--e-max", type=float, default=2.5)
    parser.add_argument("--e-step", type=float, default=0.1)
    parser.add_argument("--amplitude", type=float, default=1.0)
    parser.add_argument("--decay", type=float, default=1.0)
    parser.add_argument("--n-j-max", type=int, default=24)
    parser.add_argument("--n-max", type=int, default=10 ** 4)
    parser.add_argument("--out", default="out/ac-scan")
    parser.add_argument("--workers", type=int, default=None)
    args = parser.parse_args()

    cfg = build_config(args)
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as f:
        json.dump(cfg, f)
        cfg_path = f.name
    argv = ["ac-scan", "--config", cfg_path, "--out", args.out]
    if args.workers is not None:
        argv += ["--workers", str(args.workers)]
    try:
        return lab_main(argv)
    finally:
        os.unlink(cfg_path)


if __name__ == "__main__":
    raise SystemExit(main())
