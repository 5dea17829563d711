"""Configuration, orchestration, and data emission for all experiments.

A single JSON config file drives every experiment. The schema rejects
unknown keys; defaults are materialized before hashing so the provenance
copy pins the exact run. All emitted files are written atomically and are
byte-deterministic for a given config: floats are serialized with their
shortest round-trip representation and cells are reduced in key order
regardless of worker count.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import jsonschema
import numpy as np

from . import __version__
from .ac_criterion import cesaro_scan, default_n_grid, gamma_membership
from .core import OperatorSpec, constant_spec, free_laplacian
from .errors import (
    DivergentSeriesError,
    InternalConsistencyError,
    InvalidArgumentError,
    OverflowSiteError,
)
from .randpert import (
    PerturbationModel,
    SiteDistribution,
    maximal_inequality_check,
    series_convergence_check,
)
from .singular import stability_experiment, terminal_ratio_verdict
from .sparse import SparseSpec, perturbed_sparse_experiment, s_threshold
from .subordinacy import default_l_grid, detect_subordinate
from .variation import correction_ensemble

EXPERIMENTS = ("transfer", "subordinacy", "ac-scan", "inequality", "series",
               "variation", "sparse", "singular-stability")

_DIST_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["zero", "uniform", "rademacher", "tgauss"]},
        "amplitude": {"type": "number"},
        "decay": {"type": "number"},
        "trunc": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["kind"],
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "spec": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "type": {"enum": ["free", "constant", "sparse"]},
                "a": {"type": "number", "exclusiveMinimum": 0},
                "b": {"type": "number"},
                "v": {"type": "number"},
                "gamma": {"type": "integer", "minimum": 2},
                "j_max": {"type": "integer", "minimum": 1},
            },
            "required": ["type"],
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "b": _DIST_SCHEMA,
                "a": _DIST_SCHEMA,
                "delta": {"type": "number",
                          "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "E_grid": {
            "oneOf": [
                {"type": "array", "items": {"type": "number"}, "minItems": 1},
                {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "start": {"type": "number"},
                        "stop": {"type": "number"},
                        "step": {"type": "number", "exclusiveMinimum": 0},
                    },
                    "required": ["start", "stop", "step"],
                },
            ]
        },
        "seeds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "base": {"type": "integer", "minimum": 0},
                "count": {"type": "integer", "minimum": 1},
            },
        },
        "grids": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "N_j_max": {"type": "integer", "minimum": 4},
                "L_max": {"type": "number", "exclusiveMinimum": 1},
                "L_decades": {"type": "integer", "minimum": 2},
                "n_max": {"type": "integer", "minimum": 10},
                "N1": {"type": "integer", "minimum": 1},
                "N2": {"type": "integer", "minimum": 2},
                "r": {"type": "number", "minimum": 0},
                "trials": {"type": "integer", "minimum": 1},
                "n_tail": {"type": "integer", "minimum": 1},
                "s": {"type": "number", "exclusiveMinimum": 0},
                "n_cut": {"type": "integer", "minimum": 100},
                "checkpoints": {"type": "array",
                                "items": {"type": "integer", "minimum": 1}},
            },
        },
        "output": {"type": "string"},
        "workers": {"type": "integer", "minimum": 1},
    },
    "required": ["experiment"],
}

_DEFAULTS: Dict[str, Any] = {
    "spec": {"type": "free"},
    "model": {"b": {"kind": "uniform", "amplitude": 1.0, "decay": 1.0},
              "delta": 0.5},
    "E_grid": [0.5],
    "seeds": {"base": 0, "count": 20},
    "grids": {},
    "output": "out",
    "workers": 1,
}

_GRID_DEFAULTS: Dict[str, Any] = {
    "N_j_max": 30, "L_max": 1e4, "L_decades": 4, "n_max": 10 ** 4,
    "N1": 1, "N2": 10, "r": 3.0, "trials": 10 ** 4, "n_tail": 100,
    "s": 1.0, "n_cut": 10 ** 5,
}


def materialize(config: Dict[str, Any]) -> Dict[str, Any]:
    """Validate and fill in every default; returns the canonical config."""
    jsonschema.validate(config, CONFIG_SCHEMA)
    out = json.loads(json.dumps(config))
    for key, val in _DEFAULTS.items():
        if key not in out:
            out[key] = json.loads(json.dumps(val))
        elif isinstance(val, dict):
            for k2, v2 in val.items():
                out[key].setdefault(k2, json.loads(json.dumps(v2)))
    for k, v in _GRID_DEFAULTS.items():
        out["grids"].setdefault(k, v)
    for dist in ("b", "a"):
        if dist in out["model"]:
            out["model"][dist].setdefault("amplitude", 1.0)
            out["model"][dist].setdefault("decay", 1.0)
            out["model"][dist].setdefault("trunc", 2.0)
    return out


def config_hash(config: Dict[str, Any]) -> str:
    """Hash of the result-determining part of the config.

    Output location and worker count cannot change any computed value,
    so they are excluded: runs differing only in them emit identical
    file bodies.
    """
    scrubbed = {k: v for k, v in config.items()
                if k not in ("output", "workers")}
    blob = json.dumps(scrubbed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_spec(config: Dict[str, Any]) -> OperatorSpec:
    sd = config["spec"]
    if sd["type"] == "free":
        return free_laplacian()
    if sd["type"] == "constant":
        return constant_spec(sd.get("a", 1.0), sd.get("b", 0.0))
    return sparse_spec_of(config).to_operator_spec()


def sparse_spec_of(config: Dict[str, Any]) -> SparseSpec:
    sd = config["spec"]
    return SparseSpec(v=sd.get("v", 0.2), gamma=sd.get("gamma", 8),
                      j_max=sd.get("j_max", 30))


def build_model(config: Dict[str, Any]) -> PerturbationModel:
    md = config["model"]

    def dist(d):
        return SiteDistribution(kind=d["kind"],
                                amplitude=d.get("amplitude", 1.0),
                                decay=d.get("decay", 1.0),
                                trunc=d.get("trunc", 2.0))

    return PerturbationModel(
        b_dist=dist(md["b"]) if "b" in md else SiteDistribution(kind="zero"),
        a_dist=dist(md["a"]) if "a" in md else None,
        delta=md.get("delta", 0.5),
        exp_id=config["experiment"],
    )


def energy_grid(config: Dict[str, Any]) -> List[float]:
    eg = config["E_grid"]
    if isinstance(eg, dict):
        n = int(round((eg["stop"] - eg["start"]) / eg["step"]))
        return [eg["start"] + i * eg["step"] for i in range(n + 1)]
    return [float(e) for e in eg]


@dataclass
class EnsembleReport:
    experiment: str
    columns: List[str]
    rows: List[List[Any]]
    summary: Dict[str, Any]
    provenance: Dict[str, Any]
    traces: Dict[str, List[Tuple[float, float]]] = field(default_factory=dict)
    failures: List[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# per-cell computations (module-level for process-pool pickling)
# ---------------------------------------------------------------------------

def _cell(config: Dict[str, Any], E: float) -> Dict[str, Any]:
    """One (experiment, E) cell; returns rows plus optional traces."""
    exp = config["experiment"]
    g = config["grids"]
    seeds = range(config["seeds"]["base"],
                  config["seeds"]["base"] + config["seeds"]["count"])
    spec = build_spec(config)
    out: Dict[str, Any] = {"rows": [], "traces": {}}

    if exp == "transfer":
        rep = cesaro_scan(spec, E, default_n_grid(g["N_j_max"]))
        for N, avg in zip(rep.N_grid, rep.averages):
            out["rows"].append([E, N, avg, int(rep.bounded_flag)])
        out["traces"][f"cesaro_E{E}"] = list(
            zip(map(float, rep.N_grid), rep.averages))
    elif exp == "ac-scan":
        rep = cesaro_scan(spec, E, default_n_grid(g["N_j_max"]))
        model = build_model(config)
        member, psum = gamma_membership(spec, model, E,
                                        N_max=max(g["n_max"], 1000))
        out["rows"].append([E, rep.liminf_proxy, int(rep.bounded_flag),
                            int(member), psum])
    elif exp == "subordinacy":
        L_grid = default_l_grid(g["L_max"], g["L_decades"])
        res = detect_subordinate(spec, E, L_grid=L_grid)
        out["rows"].append([
            E, res.classification,
            res.theta_star if res.theta_star is not None else math.nan,
            res.beta, res.eta if res.eta is not None else math.nan,
            res.growth_exponent, int(res.regular),
        ])
        out["traces"][f"ratio_E{E}"] = [(L, r) for L, r in res.ratio_trace]
    elif exp == "variation":
        model = build_model(config)
        base = g.get("checkpoints") or [10 ** k for k in range(2, 5)]
        cps = sorted(set(base) | {2 * c for c in base})
        snaps = correction_ensemble(spec, model, E, list(seeds), cps)
        for c in sorted(set(base)):
            i, j = cps.index(c), cps.index(2 * c)
            dev = np.linalg.norm(snaps[:, j] - snaps[:, i], axis=(1, 2))
            out["rows"].append([E, c, float(np.median(dev)),
                                float(np.mean(snaps[:, i, 0, 0])),
                                float(np.mean(snaps[:, i, 1, 1]))])
    elif exp == "singular-stability":
        model = build_model(config)
        L_grid = default_l_grid(g["L_max"], g["L_decades"])
        rep = stability_experiment(spec, model, E, seeds=list(seeds),
                                   L_grid=L_grid)
        out["rows"].append([E, rep.beta, rep.eta, rep.eta_tilde,
                            int(rep.lambda_member),
                            rep.ratio_psi1[-1][1], rep.ratio_psi2[-1][1],
                            int(terminal_ratio_verdict(rep)),
                            rep.exp1, rep.exp2, int(rep.sandwich_ok)])
        out["traces"][f"psi1_E{E}"] = rep.ratio_psi1
        out["traces"][f"psi2_E{E}"] = rep.ratio_psi2
    elif exp == "sparse":
        ssp = sparse_spec_of(config)
        rep = perturbed_sparse_experiment(ssp, g["s"], list(seeds), E,
                                          n_cut=g["n_cut"])
        out["rows"].append([E, rep.s, rep.s_thr, rep.theta_star,
                            rep.fit_unpert.beta1_hat, rep.fit_unpert.beta2_hat,
                            rep.beta1_pert_median, rep.beta2_pert_median,
                            rep.max_median_diff, int(rep.sandwich_ok)])
    else:
        raise InvalidArgumentError(f"unknown per-energy experiment {exp}")
    return out


_CELL_COLUMNS = {
    "transfer": ["E", "N", "average", "bounded"],
    "ac-scan": ["E", "liminf_proxy", "bounded", "member", "partial_sum"],
    "subordinacy": ["E", "classification", "theta_star", "beta", "eta",
                    "growth_exponent", "regular"],
    "variation": ["E", "n", "median_cauchy_dev", "mean_D11", "mean_D22"],
    "singular-stability": ["E", "beta", "eta", "eta_tilde", "lambda_member",
                           "ratio_psi1_terminal", "ratio_psi2_terminal",
                           "in_band", "exp1", "exp2", "sandwich_ok"],
    "sparse": ["E", "s", "s_thr", "theta_star", "beta1_unpert", "beta2_unpert",
               "beta1_pert", "beta2_pert", "max_diff", "sandwich_ok"],
    "inequality": ["N1", "N2", "r", "empirical_prob", "bound", "exact",
                   "trials"],
    "series": ["checkpoint", "tail_sup_median", "tail_sup_p95"],
}


def _cell_star(args: Tuple[str, float]) -> Tuple[float, Dict[str, Any]]:
    cfg_json, E = args
    return E, _cell(json.loads(cfg_json), E)


def run(config: Dict[str, Any]) -> EnsembleReport:
    """Dispatch, compute all cells, and assemble the deterministic report."""
    config = materialize(config)
    exp = config["experiment"]
    g = config["grids"]
    chash = config_hash(config)
    provenance = {"config": config, "config_hash": chash,
                  "version": __version__,
                  "seed_policy": "philox(experiment-id, stream, seed, site)"}
    report = EnsembleReport(experiment=exp, columns=_CELL_COLUMNS[exp],
                            rows=[], summary={}, provenance=provenance)

    if exp == "inequality":
        model = build_model(config)
        rep = maximal_inequality_check(model, None, g["N1"], g["N2"], g["r"],
                                       trials=g["trials"],
                                       seed=config["seeds"]["base"])
        report.rows.append([g["N1"], g["N2"], g["r"], rep.empirical_prob,
                            rep.bound, int(rep.exact), rep.trials])
        report.summary["bound_holds"] = bool(
            rep.empirical_prob
            <= rep.bound + 3.0 * math.sqrt(
                max(rep.empirical_prob * (1 - rep.empirical_prob), 1e-12)
                / rep.trials))
    elif exp == "series":
        model = build_model(config)
        rep = series_convergence_check(model, lambda n: 1.0, g["n_tail"],
                                       trials=g["trials"], n_max=g["n_max"],
                                       seed=config["seeds"]["base"])
        for c, med, p95 in zip(rep.checkpoints, rep.tail_sup_median,
                               rep.tail_sup_p95):
            report.rows.append([int(c), float(med), float(p95)])
        report.summary.update({
            "tail_second_moment": rep.tail_second_moment,
            "tail_second_moment_se": rep.tail_second_moment_se,
            "variance_bound": rep.variance_bound,
            "bound_holds": bool(rep.tail_second_moment
                                <= rep.variance_bound
                                + 3.0 * rep.tail_second_moment_se),
        })
    else:
        energies = energy_grid(config)
        workers = config["workers"]
        if workers == 1:
            results = [(E, _cell(config, E)) for E in energies]
        else:
            cfg_json = json.dumps(config)
            results = []
            with concurrent.futures.ProcessPoolExecutor(workers) as pool:
                futs = {pool.submit(_cell_star, (cfg_json, E)): E
                        for E in energies}
                for fut in concurrent.futures.as_completed(futs):
                    E = futs[fut]
                    try:
                        results.append(fut.result())
                    except Exception as exc:  # cell marked failed
                        report.failures.append(f"E={E}: {exc!r}")
        # deterministic reduction: sort by energy regardless of arrival order
        for E, cell in sorted(results, key=lambda t: t[0]):
            report.rows.extend(cell["rows"])
            report.traces.update(cell["traces"])
        report.summary["n_cells"] = len(energies)
        report.summary["n_failed"] = len(report.failures)
    return report


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------

def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit(report: EnsembleReport, out_dir: str,
         formats: Sequence[str] = ("csv", "json-summary", "plotdata")) -> List[str]:
    """Write CSV / summary / plotdata files; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"output directory {out_dir} is not writable")
    chash = report.provenance["config_hash"]
    header = (f"# experiment: {report.experiment}\n"
              f"# config_hash: {chash}\n"
              f"# version: {report.provenance['version']}\n")
    written = []
    if "csv" in formats:
        lines = [header + ",".join(report.columns)]
        for row in report.rows:
            lines.append(",".join(_fmt(v) for v in row))
        path = os.path.join(out_dir, f"{report.experiment}.csv")
        _atomic_write(path, "\n".join(lines) + "\n")
        written.append(path)
    if "json-summary" in formats:
        payload = {"experiment": report.experiment,
                   "config_hash": chash,
                   "version": report.provenance["version"],
                   "summary": report.summary,
                   "failures": report.failures,
                   "provenance": report.provenance}
        path = os.path.join(out_dir, "summary.json")
        _atomic_write(path, json.dumps(payload, sort_keys=True, indent=2,
                                       default=_fmt) + "\n")
        written.append(path)
    if "plotdata" in formats:
        for name, trace in sorted(report.traces.items()):
            lines = [header.rstrip()]
            for x, y in trace:
                lines.append(f"{_fmt(float(x))} {_fmt(float(y))}")
            path = os.path.join(out_dir, f"trace_{name}.dat")
            _atomic_write(path, "\n".join(lines) + "\n")
            written.append(path)
    # provenance copy of the materialized config
    path = os.path.join(out_dir, "config.json")
    _atomic_write(path, json.dumps(report.provenance["config"],
                                   sort_keys=True, indent=2) + "\n")
    written.append(path)
    return written


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="lab",
        description="transfer-cocycle laboratory: run a configured experiment",
    )
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--seeds", type=int, help="override seed count")
    parser.add_argument("--workers", type=int,
                        help="worker processes (default: LAB_WORKERS or 1)")
    parser.add_argument("--out", help="override output directory")
    args = parser.parse_args(argv)

    try:
        with open(args.config) as f:
            config = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    config["experiment"] = args.experiment
    if args.seeds is not None:
        config.setdefault("seeds", {})["count"] = args.seeds
    if args.out is not None:
        config["output"] = args.out
    workers = args.workers
    if workers is None:
        workers = int(os.environ.get("LAB_WORKERS", "1"))
    config["workers"] = workers

    try:
        config = materialize(config)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        print(f"config error at {path}: {exc.message}", file=sys.stderr)
        return 2
    try:
        report = run(config)
    except (InternalConsistencyError, OverflowSiteError,
            DivergentSeriesError, InvalidArgumentError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    paths = emit(report, config["output"])
    for p in paths:
        print(p)
    if report.failures:
        for msg in report.failures:
            print(f"failed cell: {msg}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
