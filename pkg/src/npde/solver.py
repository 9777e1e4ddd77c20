"""Dirichlet solves by monotone damped iteration, with exact accelerators.

The baseline scheme is u <- u + tau (I u - f) on the domain nodes with the
exterior frozen at g.  The step tau = 0.9 / W uses the operator's total
positive quadrature weight W at a node, measured by applying the operator
to a negative node indicator, so every update is a convex combination of
neighbor values and the iteration inherits the discrete comparison
structure.  Linear problems are also solved by a matrix-free Krylov method
(the matvec is one operator sweep of the interior part), and finite Isaacs
problems by policy iteration; both accelerators share the damped scheme's
fixed points and the reported residual is always re-measured on the
assembled solution with the operator itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, lgmres

from .exceptions import NpdeError
from .grid import GridFunction, GridSpec, zero_closure
from .kernels import fractional_kernel
from .operators import OperatorSpec, apply, apply_sweep, extremal_operator, linear_operator

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_WINDOW = 100


class SolverError(NpdeError, RuntimeError):
    """Raised for ill-posed problems, invalid steps, or divergence."""


# ---------------------------------------------------------------------------
# problem and report types


def omega_ball(spec: GridSpec, radius: float) -> np.ndarray:
    """Nodes strictly inside the ball; nodes on the sphere carry data."""
    return spec.node_radii() < radius - 1e-9


def omega_cube(spec: GridSpec, radius: float) -> np.ndarray:
    """Nodes strictly inside the axis cube of half-side `radius`."""
    nodes = spec.nodes().reshape(spec.shape + (spec.n,))
    return np.max(np.abs(nodes), axis=-1) < radius - 1e-9


@dataclass(frozen=True)
class DirichletProblem:
    """I u = f on the masked nodes, u = g everywhere else."""

    op: OperatorSpec
    f: GridFunction
    g: GridFunction
    omega_mask: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        mask = np.array(self.omega_mask, dtype=bool, copy=True)
        if mask.shape != self.grid.shape:
            raise SolverError(
                f"omega mask shape {mask.shape} does not match grid "
                f"{self.grid.shape}")
        if not mask.any():
            raise SolverError("omega mask selects no nodes")
        if self.f.spec != self.grid or self.g.spec != self.grid:
            raise SolverError("f and g must live on the problem grid")
        interior = self.grid.interior_margin_mask(self.grid.h)
        if np.any(mask & ~interior):
            raise SolverError(
                "omega nodes must keep a margin of at least r0 = h from "
                "the box boundary")
        if not np.all(np.isfinite(self.g.values)):
            raise SolverError("boundary data g must be finite")
        if not np.all(np.isfinite(self.f.values[mask])):
            raise SolverError("rhs f must be finite on omega")
        object.__setattr__(self, "omega_mask", mask)
        self.omega_mask.setflags(write=False)


@dataclass(frozen=True)
class SolveReport:
    solution: GridFunction
    residual_history: tuple
    iterations: int
    step_size: float
    converged: bool
    method: str


# ---------------------------------------------------------------------------
# operator plumbing


def _center_index(prob):
    rr = np.where(prob.omega_mask, prob.grid.node_radii(), np.inf)
    return np.unravel_index(int(np.argmin(rr)), prob.grid.shape)


def weight_budget(prob: DirichletProblem, quad=None) -> float:
    """Total positive quadrature weight W at a generic domain node.

    Applying the operator to a -1 node indicator turns every second
    difference into +2 (interpolation near |y| < h keeps it positive), so
    the value is exactly twice the total kernel weight; for classes and
    families the plus-extremal / member maximum gives the largest budget
    any policy can couple with, which is what the step bound needs.
    """
    spec = prob.grid
    idx = _center_index(prob)
    vals = np.zeros(spec.shape)
    vals[idx] = -1.0
    e = GridFunction(spec, vals, zero_closure(), check=False)
    x = spec.nodes().reshape(spec.shape + (spec.n,))[idx]
    op = prob.op
    if op.variant == "linear":
        return apply(op, e, x, quad)
    if op.variant.startswith("extremal"):
        plus = extremal_operator(op.kernel_class, "plus")
        return apply(plus, e, x, quad)
    return max(apply(linear_operator(K), e, x, quad)
               for row in op.family for K in row)


def _op_values(op, u, mask, quad):
    """Operator values at masked nodes; sweep when possible, else apply."""
    try:
        vals, ok = apply_sweep(op, u, quad)
        if np.all(ok[mask]):
            return vals
    except NpdeError:
        pass
    out = np.full(u.spec.shape, np.nan)
    nodes = u.spec.nodes().reshape(u.spec.shape + (u.spec.n,))
    for ij in np.argwhere(mask):
        t = tuple(ij)
        out[t] = apply(op, u, nodes[t], quad)
    return out


def residual(prob: DirichletProblem, u: GridFunction,
             quad=None) -> GridFunction:
    """I u - f on the domain nodes, zero elsewhere (zero exterior)."""
    vals = _op_values(prob.op, u, prob.omega_mask, quad)
    out = np.where(prob.omega_mask, vals - prob.f.values, 0.0)
    return GridFunction(prob.grid, out, zero_closure(), check=False)


def _initial_iterate(prob):
    # g's node values double as the warm start on omega: constants are
    # then fixed points immediately, and g off omega is exact by design.
    return GridFunction(prob.grid, prob.g.values.copy(), prob.g.closure,
                        check=False)


def _sup_residual(prob, u, quad):
    vals = _op_values(prob.op, u, prob.omega_mask, quad)
    r = vals[prob.omega_mask] - prob.f.values[prob.omega_mask]
    return float(np.max(np.abs(r))), r


# ---------------------------------------------------------------------------
# damped baseline


def _solve_damped(prob, tol, max_iters, tau, quad):
    mask = prob.omega_mask
    u = _initial_iterate(prob)
    history = []
    iterations = 0
    converged = False
    for k in range(max_iters + 1):
        res, r = _sup_residual(prob, u, quad)
        history.append(res)
        if not np.isfinite(res):
            raise SolverError(
                f"non-finite update at iteration {k}; history {history[-5:]}")
        if res <= tol:
            converged = True
            break
        if (k >= DIVERGENCE_WINDOW
                and res > DIVERGENCE_FACTOR * history[k - DIVERGENCE_WINDOW]):
            raise SolverError(
                f"residual diverged {DIVERGENCE_FACTOR:g}x over the last "
                f"{DIVERGENCE_WINDOW} iterations (now {res:.3g}); "
                f"history tail {history[-3:]}")
        if k == max_iters:
            break
        new = u.values.copy()
        new[mask] += tau * r
        u = GridFunction(prob.grid, new, prob.g.closure, check=False)
        iterations += 1
    return u, history, iterations, converged


# ---------------------------------------------------------------------------
# Krylov route for linear operators


def _interior_part(prob, w):
    vals = np.zeros(prob.grid.shape)
    vals[prob.omega_mask] = w
    return GridFunction(prob.grid, vals, zero_closure(), check=False)


def _solve_krylov(prob, op, tol, max_iters, quad):
    mask = prob.omega_mask
    nmask = int(mask.sum())
    background = GridFunction(
        prob.grid, np.where(mask, 0.0, prob.g.values), prob.g.closure,
        check=False)
    base = _op_values(op, background, mask, quad)[mask]
    rhs = prob.f.values[mask] - base
    matvecs = 0

    def matvec(w):
        nonlocal matvecs
        matvecs += 1
        return _op_values(op, _interior_part(prob, w), mask, quad)[mask]

    A = LinearOperator((nmask, nmask), matvec=matvec)
    u0 = _initial_iterate(prob)
    res0, _ = _sup_residual(prob, u0, quad)
    history = [res0]
    if res0 <= tol:
        return u0, history, 0, True
    w, info = lgmres(A, rhs, x0=u0.values[mask].copy(), rtol=1e-14,
                     atol=0.05 * tol, maxiter=max(1, max_iters))
    vals = np.where(mask, 0.0, prob.g.values)
    vals[mask] = w
    u = GridFunction(prob.grid, vals, prob.g.closure, check=False)
    res, _ = _sup_residual(prob, u, quad)
    history.append(res)
    return u, history, matvecs, bool(info == 0 and res <= tol)


# ---------------------------------------------------------------------------
# policy iteration for finite Isaacs families


def _member_values(members, u, mask, quad):
    return np.stack([_op_values(linear_operator(K), u, mask, quad)
                     for K in members])


def _combine_family(op, stacked, members_index):
    """min over rows of max within rows, plus the attaining member index."""
    row_vals = []
    row_args = []
    for row in members_index:
        block = stacked[row]
        row_vals.append(np.max(block, axis=0))
        row_args.append(np.take(np.asarray(row), np.argmax(block, axis=0)))
    rv = np.stack(row_vals)
    which_row = np.argmin(rv, axis=0)
    combined = np.take_along_axis(rv, which_row[None], 0)[0]
    sel = np.take_along_axis(np.stack(row_args), which_row[None], 0)[0]
    return combined, sel


def _solve_policy(prob, tol, max_iters, quad, max_outer=60):
    mask = prob.omega_mask
    members = [K for row in prob.op.family for K in row]
    members_index = []
    count = 0
    for row in prob.op.family:
        members_index.append(list(range(count, count + len(row))))
        count += len(row)
    background = GridFunction(
        prob.grid, np.where(mask, 0.0, prob.g.values), prob.g.closure,
        check=False)
    base_stack = _member_values(members, background, mask, quad)
    nmask = int(mask.sum())
    u = _initial_iterate(prob)
    history = []
    iterations = 0
    for outer in range(max_outer):
        stacked = _member_values(members, u, mask, quad)
        combined, sel = _combine_family(prob.op, stacked, members_index)
        res = float(np.max(np.abs((combined - prob.f.values)[mask])))
        history.append(res)
        if res <= tol:
            return u, history, iterations, True
        sel_flat = sel[mask]

        def matvec(w):
            part = _interior_part(prob, w)
            st = _member_values(members, part, mask, quad)
            flat = st[:, mask]
            return np.take_along_axis(flat, sel_flat[None], 0)[0]

        A = LinearOperator((nmask, nmask), matvec=matvec)
        base_flat = np.take_along_axis(
            base_stack[:, mask], sel_flat[None], 0)[0]
        rhs = prob.f.values[mask] - base_flat
        w, info = lgmres(A, rhs, x0=u.values[mask].copy(), rtol=1e-14,
                         atol=0.05 * tol, maxiter=max(1, max_iters))
        iterations += 1
        vals = np.where(mask, 0.0, prob.g.values)
        vals[mask] = w
        u = GridFunction(prob.grid, vals, prob.g.closure, check=False)
    res, _ = _sup_residual(prob, u, quad)
    history.append(res)
    return u, history, iterations, bool(res <= tol)


# ---------------------------------------------------------------------------
# entry point


def _linear_route(op):
    """The linear operator to hand to Krylov, or None."""
    if op.variant == "linear":
        return op
    if op.variant.startswith("extremal"):
        C = op.kernel_class
        if C.tag in ("L0", "L1") and C.lam == C.Lam:
            return linear_operator(
                fractional_kernel(C.n, C.sigma, C.lam, C.Lam))
    return None


def solve(prob: DirichletProblem, tol: float = 1e-8, max_iters: int = 20000,
          method: str = "auto", quad=None, tau=None) -> SolveReport:
    """Solve I u = f on omega with exterior data g.

    method 'damped' runs the baseline monotone iteration; 'krylov'
    (linear routes only) and 'policy' (finite Isaacs only) are the exact
    accelerators; 'auto' picks the accelerator the operator admits and
    falls back to damped.  tau overrides the measured step for the
    damped scheme only (experiments and failure tests).
    """
    if not (tol > 0.0 and np.isfinite(tol)):
        raise SolverError(f"tol must be positive and finite, got {tol}")
    if max_iters < 0:
        raise SolverError("max_iters must be nonnegative")
    W = weight_budget(prob, quad)
    if tau is None:
        if not (np.isfinite(W) and W > 0.0):
            raise SolverError(f"weight budget W = {W}; step tau unusable")
        tau_val = 0.9 / W
    else:
        tau_val = float(tau)
        if not (tau_val > 0.0 and np.isfinite(tau_val)):
            raise SolverError(f"step tau must be positive, got {tau}")

    route = _linear_route(prob.op)
    if method == "auto":
        if route is not None:
            method = "krylov"
        elif prob.op.variant == "isaacs":
            method = "policy"
        else:
            method = "damped"
    if method == "krylov":
        if route is None:
            raise SolverError(
                "krylov needs a linear operator (or an extremal one with "
                "lam = Lam)")
        u, history, iters, converged = _solve_krylov(
            prob, route, tol, max_iters, quad)
    elif method == "policy":
        if prob.op.variant != "isaacs":
            raise SolverError("policy iteration needs a finite Isaacs family")
        u, history, iters, converged = _solve_policy(
            prob, tol, max_iters, quad)
    elif method == "damped":
        u, history, iters, converged = _solve_damped(
            prob, tol, max_iters, tau_val, quad)
    else:
        raise SolverError(f"unknown method {method!r}")
    return SolveReport(solution=u, residual_history=tuple(history),
                       iterations=iters, step_size=tau_val,
                       converged=converged, method=method)
