"""Manifest-driven experiment harness.

A manifest is a plain text file of ``key = value`` lines.  Blank lines and
lines starting with ``#`` are ignored.  The ``experiment`` key selects the
runner; every other key must belong to that runner's schema (see
``dyadlab defaults <experiment>``).  Lists are comma separated.

Each run writes ``<out_dir>/<prefix>.csv`` (one row per trial) and
``<out_dir>/<prefix>.json`` (criteria and summary statistics).  Both carry the
SHA-256 of the canonical resolved manifest and the package versions.

Exit status: 0 when every criterion holds, 1 when one fails, 2 for an invalid
manifest or a run refused by the resource guard.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import scipy

from . import __version__
from .grid import (
    GoodnessConfig,
    Lattice,
    ModulusOfContinuity,
    ShiftedDyadicSystem,
    bad_probability_bound,
    estimate_bad_probability,
    independence_pvalue,
)
from .haar import HaarBasis
from .operator import (
    DiscretizedOperator,
    KernelSpec,
    beurling_apply_array,
    estimate_cz_norms,
    fit_growth_exponent,
    gaussian_cross_check,
)
from .represent import SystemExpansion, random_systems, reassemble, reconstruct
from .shift import random_shift, weak11_bound, weak11_constant
from .twoweight import (
    CubeCatalog,
    build_splitting_forest,
    shift_cell_matrix,
    testing_bound_verify,
    two_weight_bound_check,
    weighted_norm,
)
from .weight import WeightProfile, ainfty, dual_weight, joint_a2, power_weight

CELL_CAP = 4096


class ConfigError(Exception):
    """Invalid manifest or refused run; carries every problem found."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


# ---------------------------------------------------------------------------
# manifest schema


def _int(text: str) -> int:
    return int(text)


def _float(text: str) -> float:
    return float(text)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _cutoffs(text: str) -> list[int | None]:
    return [None if t.strip().lower() == "none" else int(t) for t in text.split(",") if t.strip()]


def _modulus(text: str) -> ModulusOfContinuity:
    return ModulusOfContinuity.parse(text)


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join("none" if v is None else _render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Param:
    parse: Callable[[str], Any]
    default: Any
    help: str = ""


COMMON = {
    "seed": Param(_int, 0, "base seed; per-trial seeds derive from it"),
    "out_dir": Param(str, "results", "output directory"),
    "prefix": Param(str, "", "output file stem (defaults to the experiment name)"),
}

SCHEMAS: dict[str, dict[str, Param]] = {
    "haar-check": {
        "dims": Param(_ints, [1, 2], "dimensions"),
        "max_n_1d": Param(_int, 8, "largest N for d = 1"),
        "max_n_2d": Param(_int, 5, "largest N for d = 2"),
        "tol": Param(_float, 1e-12, "reconstruction and Gram tolerance"),
    },
    "shift-norms": {
        "d": Param(_int, 1),
        "N": Param(_int, 8),
        "count": Param(_int, 100, "number of random shifts"),
        "max_i": Param(_int, 3),
        "max_j": Param(_int, 3),
        "tol": Param(_float, 1e-9, "allowed excess over norm one"),
    },
    "badness-mc": {
        "dims": Param(_ints, [1, 2]),
        "r_values": Param(_ints, [6, 8, 10]),
        "phi": Param(_modulus, ModulusOfContinuity.power(0.5), "power:<g> or logpower:<g>"),
        "samples": Param(_int, 100_000),
        "independence_seeds": Param(_int, 20),
        "position_bits": Param(_int, 2),
        "significance": Param(_float, 0.01),
    },
    "weak11": {
        "d": Param(_int, 1),
        "N": Param(_int, 8),
        "count": Param(_int, 200, "number of random scale-separated shifts"),
        "inputs_per_shift": Param(_int, 20),
        "max_i": Param(_int, 3),
        "max_j": Param(_int, 3),
    },
    "represent": {
        "mode": Param(str, "both", "exact, mc or both"),
        "kernel": Param(str, "hilbert"),
        "kernel_alpha": Param(_float, 1.0),
        "N": Param(_int, 8),
        "r": Param(_int, 6),
        "phi": Param(_modulus, ModulusOfContinuity.power(0.5)),
        "psi": Param(_modulus, ModulusOfContinuity.power(1.0)),
        "exact_systems": Param(_int, 3, "fixed systems for the exactness check"),
        "exact_tol": Param(_float, 1e-9),
        "samples": Param(_int, 200, "random systems per Monte Carlo run"),
        "runs": Param(_int, 20),
        "cutoffs": Param(_cutoffs, [2, 4, 6, None], "cutoff list; none means untruncated"),
        "pi_samples": Param(_int, 1_000_000),
        "confidence_z": Param(_float, 2.576),
        "min_covered": Param(_int, 19),
    },
    "two-weight-sweep": {
        "trials": Param(_int, 200),
        "n_values": Param(_ints, [6, 7, 8]),
        "max_i": Param(_int, 2),
        "max_j": Param(_int, 2),
        "power_alphas": Param(_floats, [0.5, 0.7, 0.9]),
        "lognormal_scale": Param(_float, 1.5),
        "coarse_level": Param(_int, 6, "random weights are constant on cubes of this level"),
        "stability_factor": Param(_float, 2.0),
    },
    "a2-scaling": {
        "N": Param(_int, 8),
        "i": Param(_int, 1),
        "j": Param(_int, 1),
        "shift_seed": Param(_int, 7),
        "maximal": Param(_bool, True),
        "x0": Param(_float, 0.0, "singular point of the power weight"),
        "alpha_min": Param(_float, 0.0),
        "alpha_max": Param(_float, 2.2),
        "alpha_count": Param(_int, 23),
        "a2_cap": Param(_float, 1000.0, "points with larger [w,sigma]_A2 are left out of the fit"),
        "slope_max": Param(_float, 1.1),
    },
    "beurling-powers": {
        "grid": Param(_int, 64),
        "n_max": Param(_int, 16),
        "alpha": Param(_float, 0.5),
        "isometry_tol": Param(_float, 1e-12),
        "exponent_window": Param(_float, 0.2),
        "cross_sizes": Param(_ints, [16, 32, 64]),
        "cross_n": Param(_ints, [1, 2, 3]),
    },
}

EXPERIMENTS = tuple(SCHEMAS)


@dataclass
class Manifest:
    experiment: str
    params: dict[str, Any]

    def canonical(self) -> str:
        lines = [f"experiment = {self.experiment}"]
        lines += [f"{k} = {_render(self.params[k])}" for k in sorted(self.params)]
        return "\n".join(lines) + "\n"

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def schema(experiment: str) -> dict[str, Param]:
    return {**SCHEMAS[experiment], **COMMON}


def parse_manifest(text: str, experiment: str | None = None) -> Manifest:
    """Parse and validate manifest text; all problems are reported together."""
    problems: list[str] = []
    raw: dict[str, tuple[int, str]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            problems.append(f"line {lineno}: expected 'key = value'")
            continue
        if key in raw:
            problems.append(f"line {lineno}: duplicate key {key!r}")
            continue
        raw[key] = (lineno, value)
    name = raw.pop("experiment", (0, experiment or ""))[1]
    if experiment is not None and name != experiment:
        problems.append(f"manifest experiment {name!r} does not match subcommand {experiment!r}")
    if name not in SCHEMAS:
        problems.append(f"unknown experiment {name!r}; expected one of {', '.join(EXPERIMENTS)}")
        raise ConfigError(problems)
    fields = schema(name)
    params = {k: p.default for k, p in fields.items()}
    for key, (lineno, value) in raw.items():
        if key not in fields:
            problems.append(f"line {lineno}: unknown key {key!r} for {name}")
            continue
        try:
            params[key] = fields[key].parse(value)
        except ValueError as exc:
            problems.append(f"line {lineno}: {key}: {exc}")
    if not problems:
        problems += _validate(name, params)
    if problems:
        raise ConfigError(problems)
    if not params["prefix"]:
        params["prefix"] = name
    return Manifest(name, params)


def default_manifest(experiment: str) -> str:
    fields = schema(experiment)
    lines = [f"experiment = {experiment}"]
    for key, p in fields.items():
        if p.help:
            lines.append(f"# {p.help}")
        lines.append(f"{key} = {_render(p.default)}")
    return "\n".join(lines) + "\n"


def _validate(name: str, p: dict) -> list[str]:
    bad = []

    def need(cond, msg):
        if not cond:
            bad.append(msg)

    for key in ("count", "trials", "samples", "runs", "exact_systems", "inputs_per_shift", "alpha_count",
                "independence_seeds", "pi_samples"):
        if key in p:
            need(p[key] >= 0, f"{key} must be non-negative")
    for key in ("d",):
        if key in p:
            need(p[key] in (1, 2), "d must be 1 or 2")
    if "dims" in p:
        need(all(d in (1, 2) for d in p["dims"]), "dims must be drawn from 1, 2")
    for key in ("max_i", "max_j", "i", "j"):
        if key in p:
            need(p[key] >= 0, f"{key} must be non-negative")
    if name == "represent":
        need(p["mode"] in ("exact", "mc", "both"), "mode must be exact, mc or both")
        need(p["kernel"] == "hilbert", "only the hilbert kernel is registered for this experiment")
        need(p["samples"] >= 2 or p["mode"] == "exact", "Monte Carlo runs need at least two samples")
    if name == "two-weight-sweep":
        need(all(n >= p["coarse_level"] for n in p["n_values"]), "every N must be at least coarse_level")
    if name == "beurling-powers":
        need(p["n_max"] >= 2, "n_max must be at least 2 to fit an exponent")
        need(0 < p["alpha"] < 1, "alpha must lie in (0, 1)")
    if name == "badness-mc":
        try:
            for r in p["r_values"]:
                GoodnessConfig(p["phi"], r)
        except ValueError as exc:
            bad.append(str(exc))
    return bad


def _guard_cells(d: int, n: int, what: str) -> None:
    cells = 1 << (d * n)
    if cells > CELL_CAP:
        raise ConfigError([f"{what}: d={d}, N={n} needs {cells} cells, above the dense cap of {CELL_CAP}"])


# ---------------------------------------------------------------------------
# runners


@dataclass
class Result:
    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    criteria: dict[str, bool] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.criteria.values())


def _pmap(fn, items, threads: int) -> list:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def run_haar_check(p: dict, threads: int) -> Result:
    res = Result(["d", "N", "roundtrip_error", "gram_error"])
    cases = [(d, n) for d in p["dims"] for n in range(1, (p["max_n_1d"] if d == 1 else p["max_n_2d"]) + 1)]
    for d, n in cases:
        _guard_cells(d, n, "haar-check")

    def one(case):
        d, n = case
        system = ShiftedDyadicSystem.standard(Lattice.unit(d, n))
        basis = HaarBasis(system)
        rng = np.random.default_rng([p["seed"], d, n])
        f = rng.standard_normal((4,) + tuple(system.lattice.domain_shape))
        rt = float(np.abs(basis.synthesize_array(basis.analyze_array(f)) - f).max())
        m = basis.matrix()
        gram = m @ m.T * system.lattice.cell_measure
        ge = float(np.abs(gram - np.eye(len(gram))).max())
        return {"d": d, "N": n, "roundtrip_error": rt, "gram_error": ge}

    res.rows = _pmap(one, cases, threads)
    worst_rt = max((r["roundtrip_error"] for r in res.rows), default=0.0)
    worst_g = max((r["gram_error"] for r in res.rows), default=0.0)
    res.summary = {"max_roundtrip_error": worst_rt, "max_gram_error": worst_g}
    res.criteria = {"roundtrip": worst_rt <= p["tol"], "orthonormal": worst_g <= p["tol"]}
    return res


def run_shift_norms(p: dict, threads: int) -> Result:
    res = Result(["trial", "i", "j", "maximal", "entries", "norm", "iterations", "converged"])
    system = ShiftedDyadicSystem.standard(Lattice.unit(p["d"], p["N"]))
    basis = HaarBasis(system)
    types = [(i, j) for i in range(p["max_i"] + 1) for j in range(p["max_j"] + 1) if max(i, j) < p["N"]]

    def one(t):
        i, j = types[t % len(types)]
        maximal = bool((t // len(types)) % 2 == 0)
        shift = random_shift(basis, i, j, p["seed"] * 100_003 + t, maximal=maximal)
        est = shift.power_norm(tol=1e-13, maxiter=20000)
        return {"trial": t, "i": i, "j": j, "maximal": maximal, "entries": shift.size,
                "norm": est.value, "iterations": est.iterations, "converged": est.converged}

    res.rows = _pmap(one, range(p["count"]), threads)
    worst = max((r["norm"] for r in res.rows), default=0.0)
    res.summary = {"max_norm": worst, "types": [list(t) for t in types]}
    res.criteria = {"norm_at_most_one": worst <= 1.0 + p["tol"]}
    return res


def run_badness_mc(p: dict, threads: int) -> Result:
    res = Result(["d", "r", "phi", "samples", "estimate", "stderr", "bound", "median_pvalue"])
    cases = [(d, r) for d in p["dims"] for r in p["r_values"]]

    def one(case):
        d, r = case
        cfg = GoodnessConfig(p["phi"], r)
        est, se = estimate_bad_probability(cfg, d, p["samples"], p["seed"] * 7 + 11 * d + r)
        pvals = [independence_pvalue(cfg, d, p["samples"], p["seed"] * 1009 + 100 * r + 10 * d + s, p["position_bits"])
                 for s in range(p["independence_seeds"])]
        med = float(np.median(pvals)) if pvals else 1.0
        return {"d": d, "r": r, "phi": str(p["phi"]), "samples": p["samples"], "estimate": est, "stderr": se,
                "bound": bad_probability_bound(cfg, d), "median_pvalue": med}

    res.rows = _pmap(one, cases, threads)
    res.criteria = {
        "below_bound": all(r["estimate"] <= r["bound"] + 3 * r["stderr"] for r in res.rows),
        "independent": all(r["median_pvalue"] >= p["significance"] for r in res.rows),
    }
    res.summary = {"max_estimate_over_bound": max((r["estimate"] / r["bound"] for r in res.rows), default=0.0)}
    return res


def run_weak11(p: dict, threads: int) -> Result:
    res = Result(["trial", "i", "j", "scale_class", "ratio"])
    system = ShiftedDyadicSystem.standard(Lattice.unit(p["d"], p["N"]))
    basis = HaarBasis(system)
    types = [(i, j) for i in range(p["max_i"] + 1) for j in range(p["max_j"] + 1) if max(i, j) < p["N"]]

    def one(t):
        rng = np.random.default_rng([p["seed"], t])
        i, j = types[int(rng.integers(len(types)))]
        cls = int(rng.integers(max(i, j) + 1))
        shift = random_shift(basis, i, j, int(rng.integers(2**31)), maximal=bool(rng.integers(2)), scale_class=cls)
        ratio = weak11_constant(shift, p["inputs_per_shift"], int(rng.integers(2**31)))
        return {"trial": t, "i": i, "j": j, "scale_class": cls, "ratio": ratio}

    res.rows = _pmap(one, range(p["count"]), threads)
    worst = max((r["ratio"] for r in res.rows), default=0.0)
    res.summary = {"max_ratio": worst, "bound": weak11_bound(p["d"])}
    res.criteria = {"weak_type_bound": worst <= weak11_bound(p["d"])}
    return res


def _represent_inputs(lat: Lattice, seed: int):
    rng = np.random.default_rng([seed, 17])
    f = np.zeros(lat.domain_shape)
    g = np.zeros(lat.domain_shape)
    sl = lat.support_slices()
    f[sl] = rng.standard_normal(lat.support_shape)
    g[sl] = rng.standard_normal(lat.support_shape)
    return f, g


def run_represent(p: dict, threads: int) -> Result:
    cols = ["table", "index", "cutoff", "lhs", "value", "stderr", "relative_error", "residual", "covered"]
    res = Result(cols)
    lat = Lattice.padded(1, p["N"], 0)
    if lat.n_cells > CELL_CAP:
        raise ConfigError([f"represent: N={p['N']} needs {lat.n_cells} cells, above the dense cap of {CELL_CAP}"])
    op = DiscretizedOperator(KernelSpec.hilbert(p["kernel_alpha"]), lat)
    cfg = GoodnessConfig(p["phi"], p["r"])
    f, g = _represent_inputs(lat, p["seed"])
    lhs = float(op.pair(g, f))
    crit = {}
    if p["mode"] in ("exact", "both"):
        worst = 0.0
        for n, system in enumerate(random_systems(lat, p["exact_systems"], p["seed"], cfg.horizon)):
            exp = SystemExpansion(op, system, cfg)
            values = {"double_sum": exp.unfiltered_sum(f, g), "reassembled": reassemble(exp.pieces(f, g, filtered=False))}
            for name, v in values.items():
                rel = abs(v - lhs) / abs(lhs)
                worst = max(worst, rel)
                res.rows.append({"table": name, "index": n, "cutoff": "", "lhs": lhs, "value": v, "stderr": "",
                                 "relative_error": rel, "residual": abs(v - lhs), "covered": ""})
        res.summary["max_relative_error"] = worst
        crit["exact"] = worst <= p["exact_tol"]
    if p["mode"] in ("mc", "both"):
        cutoffs = p["cutoffs"]

        def one(run):
            return reconstruct(op, f, g, cfg, p["psi"], cutoffs, p["samples"], p["seed"] + 1000 * (run + 1), p["pi_samples"])

        all_reports = _pmap(one, range(p["runs"]), threads)
        covered = 0
        monotone = True
        for run, reps in enumerate(all_reports):
            full = reps[-1]
            ok = abs(full.estimate - full.lhs) <= p["confidence_z"] * full.stderr
            covered += ok
            for a, b in zip(reps, reps[1:]):
                if b.residual > a.residual + 3.0 * max(a.stderr, b.stderr):
                    monotone = False
            for rep in reps:
                res.rows.append({"table": "monte_carlo", "index": run, "cutoff": "none" if rep.cutoff is None else rep.cutoff,
                                 "lhs": rep.lhs, "value": rep.estimate, "stderr": rep.stderr,
                                 "relative_error": rep.residual / abs(rep.lhs), "residual": rep.residual,
                                 "covered": bool(ok) if rep is full else ""})
        res.summary.update({"covered_runs": covered, "runs": p["runs"]})
        crit["coverage"] = covered >= min(p["min_covered"], p["runs"])
        crit["residual_monotone"] = monotone
    res.summary["lhs"] = lhs
    res.criteria = crit
    return res


def _coarse_lognormal(system, level: int, scale: float, rng) -> WeightProfile:
    base = np.exp(scale * rng.standard_normal(1 << level))
    return WeightProfile.from_values(np.repeat(base, 1 << (system.N - level)), system)


def run_two_weight_sweep(p: dict, threads: int) -> Result:
    cols = ["trial", "N", "i", "j", "weights", "norm", "testing", "testing_dual", "a2", "two_weight_ratio",
            "lower_bound_ok", "ainfty_sigma", "ainfty_w", "testing_ratio", "testing_ratio_dual", "carleson_ok"]
    res = Result(cols)
    for n in p["n_values"]:
        _guard_cells(1, n, "two-weight-sweep")
    setups = {}
    for n in p["n_values"]:
        system = ShiftedDyadicSystem.standard(Lattice.unit(1, n))
        setups[n] = (system, HaarBasis(system), CubeCatalog(system))
    types = [(i, j) for i in range(p["max_i"] + 1) for j in range(p["max_j"] + 1)]

    def one(t):
        rng = np.random.default_rng([p["seed"], t])
        n = p["n_values"][t % len(p["n_values"])]
        system, basis, cat = setups[n]
        i, j = types[int(rng.integers(len(types)))]
        shift = random_shift(basis, i, j, int(rng.integers(2**31)), maximal=bool(rng.integers(2)))
        kind = t // len(p["n_values"]) % 3
        if kind == 0 and p["power_alphas"]:
            alpha = float(rng.choice(p["power_alphas"]))
            x0 = float(rng.choice([0.0, 1.0 / 3.0]))
            w = power_weight(system, alpha, x0)
            sigma = dual_weight(w)
            label = f"power:{alpha:g}@{x0:.4f}"
        elif kind == 1:
            w = _coarse_lognormal(system, p["coarse_level"], p["lognormal_scale"], rng)
            sigma = _coarse_lognormal(system, p["coarse_level"], p["lognormal_scale"], rng)
            label = "lognormal-pair"
        else:
            w = _coarse_lognormal(system, p["coarse_level"], p["lognormal_scale"], rng)
            sigma = dual_weight(w)
            label = "lognormal-dual"
        tw = two_weight_bound_check(shift, w, sigma, cat)
        tb = testing_bound_verify(shift, w, sigma, cat)
        forest = build_splitting_forest(shift.kappa, w, sigma, 0, cat)
        return {"trial": t, "N": n, "i": i, "j": j, "weights": label, "norm": tw.norm, "testing": tw.testing,
                "testing_dual": tw.testing_dual, "a2": tw.a2, "two_weight_ratio": tw.ratio,
                "lower_bound_ok": tw.lower_bound_ok, "ainfty_sigma": tb.ainfty_sigma, "ainfty_w": tb.ainfty_w,
                "testing_ratio": tb.ratio, "testing_ratio_dual": tb.ratio_dual,
                "carleson_ok": bool(forest.invariants()["carleson"])}

    res.rows = _pmap(one, range(p["trials"]), threads)
    per_n_tw, per_n_tb = {}, {}
    for r in res.rows:
        per_n_tw[r["N"]] = max(per_n_tw.get(r["N"], 0.0), r["two_weight_ratio"])
        per_n_tb[r["N"]] = max(per_n_tb.get(r["N"], 0.0), r["testing_ratio"], r["testing_ratio_dual"])

    def spread(values):
        vals = [v for v in values if v > 0]
        return max(vals) / min(vals) if vals else 1.0

    res.summary = {
        "two_weight_constant": max(per_n_tw.values(), default=0.0),
        "two_weight_constant_by_N": {str(k): v for k, v in sorted(per_n_tw.items())},
        "testing_constant": max(per_n_tb.values(), default=0.0),
        "testing_constant_by_N": {str(k): v for k, v in sorted(per_n_tb.items())},
    }
    res.criteria = {
        "lower_bound": all(r["lower_bound_ok"] for r in res.rows),
        "two_weight_constant_stable": spread(per_n_tw.values()) <= p["stability_factor"]
        and all(math.isfinite(v) for v in per_n_tw.values()),
        "testing_constant_stable": spread(per_n_tb.values()) <= p["stability_factor"]
        and all(math.isfinite(v) for v in per_n_tb.values()),
        "carleson": all(r["carleson_ok"] for r in res.rows),
    }
    return res


def run_a2_scaling(p: dict, threads: int) -> Result:
    res = Result(["alpha", "a2", "ainfty_w", "ainfty_sigma", "characteristic", "norm", "in_fit"])
    _guard_cells(1, p["N"], "a2-scaling")
    alphas = np.linspace(p["alpha_min"], p["alpha_max"], p["alpha_count"]) if p["alpha_count"] else np.zeros(0)
    if len(alphas):
        system = ShiftedDyadicSystem.standard(Lattice.unit(1, p["N"]))
        basis = HaarBasis(system)
        shift = random_shift(basis, p["i"], p["j"], p["shift_seed"], maximal=p["maximal"])
        s_mat = shift_cell_matrix(shift)

        def one(alpha):
            w = power_weight(system, float(alpha), p["x0"])
            sigma = dual_weight(w)
            a2 = joint_a2(w, sigma)
            aw, asg = ainfty(w), ainfty(sigma)
            return {"alpha": float(alpha), "a2": a2, "ainfty_w": aw, "ainfty_sigma": asg,
                    "characteristic": math.sqrt(a2) * (math.sqrt(aw) + math.sqrt(asg)),
                    "norm": weighted_norm(s_mat, w, sigma), "in_fit": a2 <= p["a2_cap"]}

        res.rows = _pmap(one, alphas, threads)
    fit = [r for r in res.rows if r["in_fit"]]
    crit = {}
    if len(fit) >= 2 and len({r["a2"] for r in fit}) >= 2:
        y = np.log([r["norm"] for r in fit])
        s_char = float(np.polyfit(np.log([r["characteristic"] for r in fit]), y, 1)[0])
        s_a2 = float(np.polyfit(np.log([r["a2"] for r in fit]), y, 1)[0])
        res.summary = {"slope_characteristic": s_char, "slope_a2": s_a2, "fit_points": len(fit),
                       "max_a2_in_fit": max(r["a2"] for r in fit)}
        crit = {"slope_characteristic": s_char <= p["slope_max"], "slope_a2": s_a2 <= p["slope_max"]}
    else:
        res.summary = {"fit_points": len(fit)}
    res.criteria = crit
    return res


def run_beurling_powers(p: dict, threads: int) -> Result:
    res = Result(["table", "n", "size", "isometry_error", "c0_estimate", "c0_exact", "c_alpha", "discrepancy"])
    rng = np.random.default_rng([p["seed"], 5])
    m = p["grid"]
    f = rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))
    f -= f.mean()  # the multiplier annihilates constants
    ns = list(range(1, p["n_max"] + 1))

    def power_row(n):
        iso = max(abs(np.linalg.norm(beurling_apply_array(s, f)) / np.linalg.norm(f) - 1.0) for s in (n, -n))
        c0, ca = estimate_cz_norms(n, p["alpha"])
        return {"table": "power", "n": n, "size": m, "isometry_error": float(iso), "c0_estimate": c0,
                "c0_exact": n / math.pi, "c_alpha": ca, "discrepancy": ""}

    res.rows = _pmap(power_row, ns, threads)
    cross = [(n, s) for n in p["cross_n"] for s in p["cross_sizes"]]
    checks = _pmap(lambda c: gaussian_cross_check(c[0], c[1]), cross, threads)
    for (n, s), chk in zip(cross, checks):
        res.rows.append({"table": "cross_check", "n": n, "size": s, "isometry_error": "", "c0_estimate": "",
                         "c0_exact": "", "c_alpha": "", "discrepancy": chk["discrepancy"]})
    power = [r for r in res.rows if r["table"] == "power"]
    exponent = fit_growth_exponent([r["n"] for r in power], [r["c_alpha"] for r in power])
    c0_err = max(abs(r["c0_estimate"] - r["c0_exact"]) / r["c0_exact"] for r in power)
    decreasing = True
    for n in p["cross_n"]:
        seq = [chk["discrepancy"] for (nn, _), chk in zip(cross, checks) if nn == n]
        decreasing &= all(b < a for a, b in zip(seq, seq[1:]))
    lo, hi = 1 + p["alpha"] - p["exponent_window"], 1 + p["alpha"] + p["exponent_window"]
    res.summary = {"cz_alpha_exponent": exponent, "exponent_window": [lo, hi], "c0_relative_error": c0_err,
                   "max_isometry_error": max(r["isometry_error"] for r in power)}
    res.criteria = {
        "isometry": res.summary["max_isometry_error"] <= p["isometry_tol"],
        "c0_exact": c0_err <= 1e-12,
        "cz_alpha_exponent": lo <= exponent <= hi,
        "cross_check_decreasing": decreasing,
    }
    return res


RUNNERS: dict[str, Callable[[dict, int], Result]] = {
    "haar-check": run_haar_check,
    "shift-norms": run_shift_norms,
    "badness-mc": run_badness_mc,
    "weak11": run_weak11,
    "represent": run_represent,
    "two-weight-sweep": run_two_weight_sweep,
    "a2-scaling": run_a2_scaling,
    "beurling-powers": run_beurling_powers,
}


# ---------------------------------------------------------------------------
# output


def versions() -> dict[str, str]:
    return {"dyadlab": __version__, "numpy": np.__version__, "scipy": scipy.__version__}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    if isinstance(x, ModulusOfContinuity):
        return str(x)
    return x


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def render_csv(result: Result, manifest: Manifest) -> str:
    meta = {"manifest_sha256": manifest.sha256, **{f"{k}_version": v for k, v in versions().items()}}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(result.columns + list(meta))
    for row in result.rows:
        writer.writerow([_cell(row.get(c, "")) for c in result.columns] + list(meta.values()))
    return buf.getvalue()


def render_json(result: Result, manifest: Manifest) -> str:
    doc = {
        "experiment": manifest.experiment,
        "manifest_sha256": manifest.sha256,
        "versions": versions(),
        "parameters": {k: _render(v) for k, v in sorted(manifest.params.items())},
        "trials": len(result.rows),
        "criteria": result.criteria,
        "passed": result.passed,
        "summary": result.summary,
    }
    return json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"


def execute(manifest: Manifest, out_dir: str | None = None, threads: int = 1) -> tuple[Result, Path, Path]:
    result = RUNNERS[manifest.experiment](manifest.params, max(1, threads))
    target = Path(out_dir or manifest.params["out_dir"])
    target.mkdir(parents=True, exist_ok=True)
    csv_path = target / f"{manifest.params['prefix']}.csv"
    json_path = target / f"{manifest.params['prefix']}.json"
    csv_path.write_text(render_csv(result, manifest))
    json_path.write_text(render_json(result, manifest))
    return result, csv_path, json_path


def load(path: str | None, experiment: str | None, seed_override: int | None) -> Manifest:
    if path is None:
        if experiment is None:
            raise ConfigError(["run needs --manifest"])
        text = f"experiment = {experiment}\n"
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError([f"cannot read manifest: {exc}"]) from exc
    manifest = parse_manifest(text, experiment)
    if seed_override is not None:
        manifest.params["seed"] = seed_override
    return manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dyadlab", description="Run dyadic harmonic analysis experiments from manifests.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(sp, manifest_required):
        sp.add_argument("--manifest", required=manifest_required, help="key = value manifest file")
        sp.add_argument("--out-dir", help="override the manifest's out_dir")
        sp.add_argument("--seed-override", type=int, help="replace the manifest seed")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for independent trials")

    add_run_flags(sub.add_parser("run", help="run the experiment named in the manifest"), True)
    for name in EXPERIMENTS:
        add_run_flags(sub.add_parser(name, help=f"run {name} (defaults when no manifest is given)"), False)
    d = sub.add_parser("defaults", help="print a manifest with every default for an experiment")
    d.add_argument("experiment", choices=EXPERIMENTS)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "defaults":
        sys.stdout.write(default_manifest(args.experiment))
        return 0
    experiment = None if args.command == "run" else args.command
    try:
        manifest = load(args.manifest, experiment, args.seed_override)
        result, csv_path, json_path = execute(manifest, args.out_dir, args.threads)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 2
    for name, ok in result.criteria.items():
        print(f"{'PASS' if ok else 'FAIL'} {manifest.experiment}:{name}")
    print(f"wrote {csv_path} and {json_path}")
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
