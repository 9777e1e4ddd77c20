"""Command line experiments over the operator library.

Subcommands: ``eval`` sweeps an operator over a grid function, ``solve``
runs a Dirichlet problem, ``abp`` builds the cube decomposition and its
bound, ``barrier`` constructs and verifies the global subsolution,
``regularity`` measures constants along a sigma ladder, and ``limit``
marches the second order limit.  Every output is a CSV whose first line
is a provenance comment recording the resolved-config hash, the grid,
and the sigma values; identical configs and seeds produce byte-identical
files.  Flags override values from an optional TOML config file with
sections ``[kernel]``, ``[grid]``, ``[experiment]``.  The environment
variable ``NPDE_THREADS`` caps the worker count for per-sigma sweeps;
results are collected in ladder order either way.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .barriers import build_phi, choose_p, verify_subsolution
from .envelope import abp_bound, concave_envelope, cube_decompose
from .exceptions import NpdeError
from .grid import (
    GridSpec,
    _fmt,
    constant_closure,
    radial_table_closure,
    sample_function,
    sign_step_closure,
    write_grid_csv,
    zero_closure,
)
from .kernels import kernel_from_config, l0_class
from .limits import sigma_limit_error
from .operators import (
    apply_sweep,
    extremal_operator,
    isaacs_operator,
    linear_operator,
)
from .regularity import (
    RegularityRow,
    certify_solution,
    harnack_measure,
    holder_fit,
    regularity_row,
    tail_fit,
)
from .solver import DirichletProblem, SolverError, omega_ball, omega_cube, solve


class UsageError(ValueError):
    """Bad flags, config files, or tags; exits with status 1."""


SUBCOMMANDS = ("eval", "solve", "abp", "barrier", "regularity", "limit")

_KERNEL_DEFAULTS = {
    "eval": {"variant": "fractional", "sigma": 1.5, "lambda": 1.0,
             "Lambda": 2.0},
    "solve": {"variant": "fractional", "sigma": 1.5, "lambda": 1.0,
              "Lambda": 2.0},
    "abp": {"variant": "fractional", "sigma": 1.5, "lambda": 1.0,
            "Lambda": 1.0},
    "barrier": {"variant": "fractional", "sigma": 1.5, "lambda": 1.0,
                "Lambda": 1.0},
    "regularity": {"variant": "fractional", "sigma": 1.5, "lambda": 1.0,
                   "Lambda": 1.0},
    "limit": {"variant": "fractional", "sigma": 1.5, "lambda": 1.0,
              "Lambda": 1.0},
}

# ladder defaults; single-sigma subcommands take theirs from [kernel]
_SIGMA_LADDERS = {
    "barrier": (0.5, 1.0, 1.5, 1.9, 1.99),
    "regularity": (1.2, 1.5, 1.8, 1.95),
    "limit": (1.5, 1.9, 1.99, 1.999),
}

_EXPERIMENT_CASES = {"holder": "sign", "harnack": "bump", "tail": "cap",
                     "c1a": "poisson"}


def _default_h(sub: str, n: int) -> float:
    if sub == "limit":
        return 1.0 / 256 if n == 1 else 1.0 / 64
    if sub == "barrier":
        return 1.0 / 128 if n == 1 else 1.0 / 64
    return 1.0 / 64


def _default_R(n: int) -> float:
    return 4.0 if n == 1 else 6.0


def _threads() -> int:
    raw = os.environ.get("NPDE_THREADS", "1")
    try:
        t = int(raw)
    except ValueError:
        raise UsageError(f"NPDE_THREADS must be an integer, got {raw!r}")
    return max(1, t)


def _map_ordered(fn, items):
    """Map fn over items, threaded when NPDE_THREADS allows, keeping
    item order in the results either way."""
    t = _threads()
    items = list(items)
    if t <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(t, len(items))) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# function and case tags


def _fn_zero(spec, seed):
    return sample_function(spec, lambda p: np.zeros(len(p)), zero_closure())


def _fn_one(spec, seed):
    return sample_function(spec, lambda p: np.ones(len(p)),
                           constant_closure(1.0))


def _fn_neg_one(spec, seed):
    return sample_function(spec, lambda p: np.full(len(p), -1.0),
                           constant_closure(-1.0))


def _fn_neg_two(spec, seed):
    return sample_function(spec, lambda p: np.full(len(p), -2.0),
                           constant_closure(-2.0))


def _fn_gaussian(spec, seed):
    from .limits import _gaussian_probe
    return _gaussian_probe(spec)[0]


def _fn_bump(spec, seed):
    # off-center bump: peak at 1.5 e_1, negligible at the box edge
    center = np.zeros(spec.n)
    center[0] = 1.5

    def fn(pts):
        d = pts - center
        return np.exp(-8.0 * np.sum(d * d, axis=1))

    return sample_function(spec, fn, constant_closure(0.0))


def _fn_sign(spec, seed):
    return sample_function(spec, lambda p: np.sign(p[:, 0]),
                           sign_step_closure(0))


def _fn_cap_core(spec, seed):
    # rho^2 / (rho^2 + r^2) with rho = 1/4: exact power tail far out
    rho2 = 0.0625
    rr = np.linspace(0.0, 8.0, 4001)
    return sample_function(
        spec, lambda p: rho2 / (rho2 + np.sum(p * p, axis=1)),
        radial_table_closure(rr, rho2 / (rho2 + rr * rr)))


def _fn_paraboloid(spec, seed):
    return sample_function(spec, lambda p: 0.5 * (1.0 - np.sum(p * p, axis=1)),
                           zero_closure())


def _fn_random(spec, seed):
    rng = np.random.default_rng(seed)
    vals = rng.standard_normal(spec.shape)
    u = sample_function(spec, lambda p: np.zeros(len(p)), zero_closure())
    return type(u)(spec, vals, u.closure, check=False)


_FUNCTIONS = {
    "zero": _fn_zero,
    "one": _fn_one,
    "neg-one": _fn_neg_one,
    "neg-two": _fn_neg_two,
    "gaussian": _fn_gaussian,
    "bump": _fn_bump,
    "sign": _fn_sign,
    "cap-core": _fn_cap_core,
    "paraboloid": _fn_paraboloid,
    "random": _fn_random,
}


@dataclass(frozen=True)
class _Case:
    """Named Dirichlet problem plus the certificate it supports."""

    omega_radius: float
    rhs: str
    boundary: str
    side: str
    cert_radius: float
    c0: object  # fixed float, or "measured" for the two-pass bound


_CASES = {
    "poisson": _Case(1.0, "neg-one", "zero", "both", 1.0, 1.0),
    "sign": _Case(1.0, "zero", "sign", "both", 1.0, 1.0),
    "bump": _Case(1.0, "zero", "bump", "both", 1.0, 1.0),
    "cap": _Case(0.25, "neg-two", "cap-core", "super", 2.0, "measured"),
}


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved configuration for one subcommand run."""

    subcommand: str
    kernel: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)
    out: str = "."
    seed: int = 20240819

    def canonical(self) -> str:
        return json.dumps({"subcommand": self.subcommand,
                           "kernel": self.kernel, "grid": self.grid,
                           "experiment": self.experiment, "seed": self.seed},
                          sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:12]

    def grid_spec(self) -> GridSpec:
        g = self.grid
        return GridSpec(int(g["n"]), float(g["h"]), float(g["R_box"]))


def _check_sigma(value, what):
    v = float(value)
    if not (0.0 < v < 2.0 and np.isfinite(v)):
        raise UsageError(f"{what} must lie in (0, 2), got {value}")
    return v


def _parse_sigmas(text):
    if isinstance(text, (list, tuple)):
        return [_check_sigma(s, "sigma") for s in text]
    try:
        parts = [p for p in str(text).split(",") if p.strip()]
        vals = [float(p) for p in parts]
    except ValueError:
        raise UsageError(f"could not parse sigma list {text!r}")
    if not vals:
        raise UsageError("sigma list is empty")
    return [_check_sigma(s, "sigma") for s in vals]


def _parse_matrix(text):
    if isinstance(text, (list, tuple)):
        flat = [float(v) for row in np.atleast_2d(np.asarray(text, float))
                for v in row]
    else:
        try:
            flat = [float(p) for p in str(text).split(",") if p.strip()]
        except ValueError:
            raise UsageError(f"could not parse matrix {text!r}")
    k = int(round(len(flat) ** 0.5))
    if k * k != len(flat) or k == 0:
        raise UsageError(
            f"matrix needs a square number of entries, got {len(flat)}")
    return [flat[i * k:(i + 1) * k] for i in range(k)]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().strip()}")


def _build_parser() -> _Parser:
    top = _Parser(prog="npde", description=__doc__.splitlines()[0])
    sub = top.add_subparsers(dest="subcommand", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", default=None,
                       help="TOML file with [kernel], [grid], [experiment]")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--n", type=int, default=None, dest="grid_n")
        p.add_argument("--grid-h", type=float, default=None, dest="grid_h")
        p.add_argument("--grid-R", type=float, default=None, dest="grid_R")

    p = sub.add_parser("eval")
    common(p)
    p.add_argument("--op", choices=("linear", "mplus", "mminus", "isaacs"),
                   default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--lambda", type=float, default=None, dest="lam")
    p.add_argument("--Lambda", type=float, default=None, dest="Lam")
    p.add_argument("--function", default=None)

    p = sub.add_parser("solve")
    common(p)
    p.add_argument("--op", choices=("linear", "mplus", "mminus", "isaacs"),
                   default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--omega", choices=("ball", "cube"), default=None)
    p.add_argument("--radius", type=float, default=None)
    p.add_argument("--rhs", default=None)
    p.add_argument("--boundary", default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--max-iters", type=int, default=None, dest="max_iters")

    p = sub.add_parser("abp")
    common(p)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--case", default=None)
    p.add_argument("--max-depth", type=int, default=None, dest="max_depth")

    p = sub.add_parser("barrier")
    common(p)
    p.add_argument("--sigma0", type=float, default=None)
    p.add_argument("--lambda", type=float, default=None, dest="lam")
    p.add_argument("--Lambda", type=float, default=None, dest="Lam")
    p.add_argument("--sigmas", default=None)

    p = sub.add_parser("regularity")
    common(p)
    p.add_argument("--experiment",
                   choices=("holder", "harnack", "tail", "c1a"), default=None)
    p.add_argument("--sigmas", default=None)
    p.add_argument("--case", default=None)
    p.add_argument("--tol", type=float, default=None)

    p = sub.add_parser("limit")
    common(p)
    p.add_argument("--A", default=None)
    p.add_argument("--probe", choices=("gaussian", "cutquad"), default=None)
    p.add_argument("--sigmas", default=None)
    return top


def _load_config_file(path):
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found")
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"config file {path}: {exc}")
    unknown = set(data) - {"kernel", "grid", "experiment"}
    if unknown:
        raise UsageError(
            f"unknown config sections {sorted(unknown)}; expected "
            "[kernel], [grid], [experiment]")
    for name in ("kernel", "grid", "experiment"):
        if name in data and not isinstance(data[name], dict):
            raise UsageError(f"config section [{name}] must be a table")
    return data


def parse_args(argv=None) -> ExperimentConfig:
    top = _build_parser()
    ns = top.parse_args(argv)
    if ns.subcommand is None:
        raise UsageError(f"missing subcommand\n{top.format_usage().strip()}")
    sub = ns.subcommand
    filecfg = _load_config_file(ns.config) if ns.config else {}

    kernel = dict(_KERNEL_DEFAULTS[sub])
    kernel.update(filecfg.get("kernel", {}))
    for key, dest in (("sigma", "sigma"), ("lambda", "lam"),
                      ("Lambda", "Lam")):
        v = getattr(ns, dest, None)
        if v is not None:
            kernel[key] = v
    kernel["sigma"] = _check_sigma(kernel["sigma"], "kernel sigma")
    kernel["lambda"] = float(kernel["lambda"])
    kernel["Lambda"] = float(kernel["Lambda"])

    experiment = dict(filecfg.get("experiment", {}))
    for key in ("op", "function", "omega", "radius", "rhs", "boundary",
                "tol", "max_iters", "case", "max_depth", "sigma0",
                "experiment", "sigmas", "A", "probe"):
        v = getattr(ns, key, None)
        if v is not None:
            experiment[key] = v

    grid = dict(filecfg.get("grid", {}))
    if ns.grid_n is not None:
        grid["n"] = ns.grid_n
    if ns.grid_h is not None:
        grid["h"] = ns.grid_h
    if ns.grid_R is not None:
        grid["R_box"] = ns.grid_R

    if sub == "limit":
        experiment["A"] = _parse_matrix(experiment.get("A", "1"))
        a_dim = len(experiment["A"])
        if "n" in grid and int(grid["n"]) != a_dim:
            raise UsageError(
                f"grid n = {grid['n']} conflicts with the {a_dim}x{a_dim} "
                "matrix A")
        grid["n"] = a_dim
    grid.setdefault("n", 1)
    grid["n"] = int(grid["n"])
    if grid["n"] < 1:
        raise UsageError(f"grid n must be >= 1, got {grid['n']}")
    grid.setdefault("h", _default_h(sub, grid["n"]))
    grid.setdefault("R_box", _default_R(grid["n"]))
    grid["h"] = float(grid["h"])
    grid["R_box"] = float(grid["R_box"])

    if sub in _SIGMA_LADDERS:
        experiment["sigmas"] = _parse_sigmas(
            experiment.get("sigmas", list(_SIGMA_LADDERS[sub])))
    if sub == "barrier":
        experiment["sigma0"] = _check_sigma(
            experiment.get("sigma0", 0.5), "sigma0")
    if sub == "eval":
        experiment.setdefault("op", "linear")
        experiment.setdefault("function", "gaussian")
        if experiment["function"] not in _FUNCTIONS:
            raise UsageError(
                f"unknown function tag {experiment['function']!r}; choose "
                f"one of {', '.join(sorted(_FUNCTIONS))}")
    if sub == "solve":
        experiment.setdefault("op", "linear")
        experiment.setdefault("omega", "ball")
        experiment.setdefault("radius", 1.0)
        experiment.setdefault("rhs", "neg-one")
        experiment.setdefault("boundary", "zero")
        experiment.setdefault("tol", 1e-9)
        experiment.setdefault("max_iters", 20000)
        for key in ("rhs", "boundary"):
            if experiment[key] not in _FUNCTIONS:
                raise UsageError(
                    f"unknown {key} tag {experiment[key]!r}; choose one of "
                    f"{', '.join(sorted(_FUNCTIONS))}")
    if sub == "abp":
        experiment.setdefault("case", "poisson")
        experiment.setdefault("max_depth", 6)
        experiment.setdefault("tol", 1e-9)
        if experiment["case"] not in _CASES and \
                experiment["case"] != "paraboloid":
            raise UsageError(
                f"unknown case tag {experiment['case']!r}; choose one of "
                f"{', '.join(sorted(list(_CASES) + ['paraboloid']))}")
    if sub == "regularity":
        experiment.setdefault("experiment", "holder")
        if experiment["experiment"] not in _EXPERIMENT_CASES:
            raise UsageError(
                f"unknown experiment {experiment['experiment']!r}; choose "
                f"one of {', '.join(sorted(_EXPERIMENT_CASES))}")
        experiment.setdefault(
            "case", _EXPERIMENT_CASES[experiment["experiment"]])
        experiment.setdefault("tol", 1e-10)
        experiment.setdefault("fit_radius", 0.5)
        experiment.setdefault("harnack_radius", 1.0)
        if experiment["case"] not in _CASES:
            raise UsageError(
                f"unknown case tag {experiment['case']!r}; choose one of "
                f"{', '.join(sorted(_CASES))}")
    if sub == "limit":
        experiment.setdefault("probe", "gaussian")
        experiment.setdefault("tol", 1e-2)

    seed = ns.seed if ns.seed is not None else \
        int(filecfg.get("experiment", {}).get("seed", 20240819))
    return ExperimentConfig(subcommand=sub, kernel=kernel, grid=grid,
                            experiment=experiment, out=ns.out, seed=seed)


# ---------------------------------------------------------------------------
# CSV plumbing


def _provenance(config: ExperimentConfig, spec: GridSpec, sigmas) -> str:
    sig = ",".join(_fmt(float(s)) for s in sigmas)
    return (f"config={config.config_hash()} grid=n{spec.n},h={_fmt(spec.h)},"
            f"R={_fmt(spec.R_box)} sigma={sig}")


def _write_csv(path, provenance, header, rows, extra_comments=()):
    with open(path, "w") as fh:
        fh.write(f"# provenance: {provenance}\n")
        for line in extra_comments:
            fh.write(f"# {line}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _outdir(config: ExperimentConfig) -> str:
    os.makedirs(config.out, exist_ok=True)
    return config.out


# ---------------------------------------------------------------------------
# runners


def _build_operator(op_name, kernel_cfg, n):
    sigma = float(kernel_cfg["sigma"])
    lam = float(kernel_cfg["lambda"])
    Lam = float(kernel_cfg["Lambda"])
    if op_name == "linear":
        return linear_operator(kernel_from_config(kernel_cfg, n))
    if op_name in ("mplus", "mminus"):
        side = "plus" if op_name == "mplus" else "minus"
        return extremal_operator(l0_class(n, sigma, lam, Lam), side)
    if op_name == "isaacs":
        from .kernels import fractional_kernel
        mid = 0.5 * (lam + Lam)

        def const(c):
            return fractional_kernel(
                n, sigma, lam, Lam,
                multiplier=lambda p, c=c: np.full(len(p), c))

        return isaacs_operator([[const(lam), const(Lam)],
                                [const(mid), const(lam)]])
    raise UsageError(f"unknown operator {op_name!r}")


def _run_eval(config: ExperimentConfig):
    spec = config.grid_spec()
    exp = config.experiment
    op = _build_operator(exp["op"], config.kernel, spec.n)
    u = _FUNCTIONS[exp["function"]](spec, config.seed)
    vals, mask = apply_sweep(op, u)
    prov = _provenance(config, spec, [config.kernel["sigma"]])
    ax = spec.axis()
    rows = []
    if spec.n == 1:
        for i in range(spec.npts):
            if mask[i]:
                rows.append((_fmt(ax[i]), _fmt(vals[i])))
        header = ("x1", "value")
    else:
        for i in range(spec.npts):
            for j in range(spec.npts):
                if mask[i, j]:
                    rows.append((_fmt(ax[i]), _fmt(ax[j]),
                                 _fmt(vals[i, j])))
        header = ("x1", "x2", "value")
    _write_csv(os.path.join(_outdir(config), "eval.csv"), prov, header, rows)


def _solve_problem(config, spec, op_name, omega, radius, rhs, boundary,
                   tol, max_iters, sigma=None):
    kcfg = dict(config.kernel)
    if sigma is not None:
        kcfg["sigma"] = float(sigma)
    op = _build_operator(op_name, kcfg, spec.n)
    f = _FUNCTIONS[rhs](spec, config.seed)
    g = _FUNCTIONS[boundary](spec, config.seed)
    mask = omega_ball(spec, radius) if omega == "ball" \
        else omega_cube(spec, radius)
    prob = DirichletProblem(op, f, g, mask, spec)
    rep = solve(prob, tol=tol, max_iters=max_iters)
    if not rep.converged:
        raise SolverError(
            f"solver did not converge within {rep.iterations} iterations "
            f"(sigma = {kcfg['sigma']}, method = {rep.method}, last "
            f"residual = {rep.residual_history[-1]:.3g})")
    return rep


def _run_solve(config: ExperimentConfig):
    spec = config.grid_spec()
    exp = config.experiment
    rep = _solve_problem(config, spec, exp["op"], exp["omega"],
                         float(exp["radius"]), exp["rhs"], exp["boundary"],
                         float(exp["tol"]), int(exp["max_iters"]))
    prov = _provenance(config, spec, [config.kernel["sigma"]])
    out = _outdir(config)
    write_grid_csv(rep.solution, os.path.join(out, "solution.csv"),
                   provenance=prov)
    rows = [(str(k), _fmt(float(r)))
            for k, r in enumerate(rep.residual_history)]
    _write_csv(os.path.join(out, "residuals.csv"), prov,
               ("iter", "residual"), rows)


def _run_abp(config: ExperimentConfig):
    spec = config.grid_spec()
    exp = config.experiment
    sigma = float(config.kernel["sigma"])
    if exp["case"] == "paraboloid":
        u = _FUNCTIONS["paraboloid"](spec, config.seed)
    else:
        case = _CASES[exp["case"]]
        rep = _solve_problem(config, spec, "linear", "ball",
                             case.omega_radius, case.rhs, case.boundary,
                             float(exp["tol"]), 20000)
        u = rep.solution
    # the decomposition measures f through its nonnegative bound
    fbound = _FUNCTIONS["one"](spec, config.seed)
    env = concave_envelope(u)
    dec = cube_decompose(u, env, fbound, sigma, int(exp["max_depth"]))
    lhs, rhs_sum = abp_bound(dec, env)
    prov = _provenance(config, spec, [sigma])
    out = _outdir(config)
    if spec.n == 1:
        header = ("cx", "diam", "level", "maxf", "passes_e", "passes_f")
    else:
        header = ("cx", "cy", "diam", "level", "maxf", "passes_e",
                  "passes_f")
    rows = []
    for c in dec.cubes:
        coords = tuple(_fmt(float(v)) for v in c.center)
        rows.append(coords + (_fmt(c.diameter), str(c.level), _fmt(c.maxf),
                              str(int(c.passes_e)), str(int(c.passes_f))))
    _write_csv(os.path.join(out, "cubes.csv"), prov, header, rows)
    _write_csv(os.path.join(out, "summary.csv"), prov,
               ("lhs", "rhs_sum", "C_measured"),
               [(_fmt(float(lhs)), _fmt(float(rhs_sum)), _fmt(dec.C))])


def _run_barrier(config: ExperimentConfig):
    spec = config.grid_spec()
    exp = config.experiment
    lam = float(config.kernel["lambda"])
    Lam = float(config.kernel["Lambda"])
    sigma0 = float(exp["sigma0"])
    sigmas = sorted(set(exp["sigmas"]) | {sigma0})
    p = choose_p(spec.n, lam, Lam)
    bp, phi = build_phi(p, sigma0, spec, lam=lam, Lam=Lam)
    prov = _provenance(config, spec, sigmas)
    out = _outdir(config)
    _write_csv(os.path.join(out, "barrier.csv"), prov,
               ("p", "delta", "cap_a", "cap_b", "scale", "sigma0",
                "psi_bound"),
               [(str(bp.p), _fmt(bp.delta), _fmt(bp.cap_a), _fmt(bp.cap_b),
                 _fmt(bp.scale), _fmt(bp.sigma0), _fmt(bp.psi_bound))])

    def one(sigma):
        return verify_subsolution(phi, sigma, delta=bp.delta, lam=lam,
                                  Lam=Lam)

    results = _map_ordered(one, sigmas)
    if spec.n == 1:
        header = ("sigma", "min_value", "argmin_x1", "psi_bound")
    else:
        header = ("sigma", "min_value", "argmin_x1", "argmin_x2",
                  "psi_bound")
    rows = []
    for sigma, (mv, argmin, psi) in zip(sigmas, results):
        coords = tuple(_fmt(float(v)) for v in argmin)
        rows.append((_fmt(float(sigma)), _fmt(float(mv))) + coords
                    + (_fmt(float(psi)),))
    _write_csv(os.path.join(out, "verify.csv"), prov, header, rows)


def _certify_case(u, case, sigma, lam, Lam):
    if case.c0 == "measured":
        probe = certify_solution(u, 1e9, sigma, lam=lam, Lam=Lam,
                                 radius=case.cert_radius, side=case.side)
        c0 = float(probe.minus_max)
        return certify_solution(u, c0, sigma, lam=lam, Lam=Lam,
                                radius=case.cert_radius, side=case.side)
    return certify_solution(u, float(case.c0), sigma, lam=lam, Lam=Lam,
                            radius=case.cert_radius, side=case.side)


def _run_regularity(config: ExperimentConfig):
    spec = config.grid_spec()
    exp = config.experiment
    which = exp["experiment"]
    case = _CASES[exp["case"]]
    lam = float(config.kernel["lambda"])
    Lam = float(config.kernel["Lambda"])
    sigmas = exp["sigmas"]

    def one(sigma):
        rep = _solve_problem(config, spec, "linear", "ball",
                             case.omega_radius, case.rhs, case.boundary,
                             float(exp["tol"]), 20000, sigma=sigma)
        u = rep.solution
        cert = _certify_case(u, case, sigma, lam, Lam)
        row = {"sigma": float(sigma)}
        if which == "holder":
            al, sem, r2 = holder_fit(u, float(exp["fit_radius"]),
                                     certificate=cert)
            row.update(holder_alpha=al, holder_seminorm=sem, holder_r2=r2)
        elif which == "harnack":
            row["harnack_c"] = harnack_measure(
                u, float(exp["harnack_radius"]), certificate=cert)
        elif which == "tail":
            eps, cc, r2 = tail_fit(u, certificate=cert)
            row.update(tail_eps=eps, tail_c=cc, tail_r2=r2)
        else:
            c0 = cert.c0 if hasattr(cert, "c0") else 1.0
            full = regularity_row(u, float(c0), float(sigma), lam=lam,
                                  Lam=Lam)
            row.update(c1a_alpha=full.c1a_alpha, c1a_r2=full.c1a_r2)
        return row

    rows = _map_ordered(one, sigmas)
    prov = _provenance(config, spec, sigmas)
    header = RegularityRow._FIELDS
    out_rows = []
    for row in rows:
        out_rows.append(tuple(_fmt(float(row[k])) if k in row else ""
                              for k in header))
    _write_csv(os.path.join(_outdir(config), "report.csv"), prov, header,
               out_rows)


def _run_limit(config: ExperimentConfig):
    spec = config.grid_spec()
    exp = config.experiment
    A = np.asarray(exp["A"], dtype=float)
    rep = sigma_limit_error(exp["probe"], A, exp["sigmas"], grid=spec,
                            c_n=exp.get("c_n"), tol=float(exp["tol"]))
    prov = _provenance(config, spec, rep.sigmas)
    rows = [(_fmt(s), _fmt(e)) for s, e in zip(rep.sigmas, rep.errors)]
    _write_csv(os.path.join(_outdir(config), "limit.csv"), prov,
               ("sigma", "error"), rows,
               extra_comments=(f"c_n: {_fmt(rep.c_n)}",
                               f"passed: {int(rep.passed)}"))


_RUNNERS = {
    "eval": _run_eval,
    "solve": _run_solve,
    "abp": _run_abp,
    "barrier": _run_barrier,
    "regularity": _run_regularity,
    "limit": _run_limit,
}


def run(config: ExperimentConfig) -> int:
    """Dispatch one resolved config; 0 on success, 1 on usage problems,
    2 on contract violations surfaced by the library."""
    try:
        _RUNNERS[config.subcommand](config)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NpdeError as exc:
        print(f"error [{config.subcommand}]: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv=None) -> int:
    try:
        config = parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
