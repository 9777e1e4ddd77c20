"""Second-order limit of the kernel operators.

As sigma -> 2 the integro-differential operators collapse onto constant
coefficient second order operators.  ``calibrate_cn`` measures the
dimensional constant c_n that makes the isotropic kernel reproduce the
Laplacian of a localized quadratic probe in that limit, and
``sigma_limit_error`` drives a sigma ladder toward 2, comparing the
change-of-variables kernel built from a positive matrix A against the
differential operator sum_ij a_ij d_ij u with a = A A^T.

The change-of-variables kernel is realized as the isotropic kernel with
the direction multiplier

    m(theta) = c_n / (det A * |A^-1 theta|^(n + sigma)),

which is even in theta and pinched between c_n e_min^(n+sigma) / det A
and c_n e_max^(n+sigma) / det A, with e_min, e_max the extreme
eigenvalues of A.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import NpdeError
from .grid import GridFunction, GridSpec, _Derived, sample_function, zero_closure
from .kernels import fractional_kernel
from .operators import apply, linear_operator


class LimitError(NpdeError, ValueError):
    """Raised for invalid limit-experiment inputs or a failed calibration."""


# calibration sweep: three orders marching on 2, geometric gap halving
_CAL_SIGMAS = (2.0 - 4e-3, 2.0 - 2e-3, 2.0 - 1e-3)
_CAL_TARGET = 2.0

# slack for the monotone-ladder check; errors at the rounding floor
# (an exactly reproduced probe) would otherwise flicker the flag
_LADDER_SLACK = 1e-12

_DEFAULT_POINTS = {
    1: ((0.0,), (-0.25,), (0.375,)),
    2: ((0.0, 0.0), (0.25, 0.0), (-0.25, 0.25), (0.0, -0.375)),
}


def _default_grid(n: int) -> GridSpec:
    if n == 1:
        return GridSpec(1, 1.0 / 256, 4.0)
    if n == 2:
        return GridSpec(2, 1.0 / 64, 6.0)
    raise LimitError(f"no default grid for n = {n}; pass one explicitly")


def _cap(r):
    """C^2 radial cap: 1 on [0, 1/2], quintic descent to 0 at 1."""
    t = np.clip((np.asarray(r, dtype=float) - 0.5) / 0.5, 0.0, 1.0)
    return 1.0 - t ** 3 * (10.0 - 15.0 * t + 6.0 * t * t)


def _cutquad_probe(grid: GridSpec):
    """x_1^2 times a radial cap: compactly supported, quadratic near 0."""

    def fn(pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return pts[:, 0] ** 2 * _cap(np.linalg.norm(pts, axis=1))

    u = sample_function(grid, fn, zero_closure())
    n = grid.n

    def hessian(x):
        x = np.asarray(x, dtype=float)
        r = float(np.linalg.norm(x))
        if r > 0.5 + 1e-12:
            raise LimitError(
                "the cutquad hessian is only defined on the plateau "
                f"|x| <= 0.5; |x| = {r:.6g}")
        H = np.zeros((n, n))
        H[0, 0] = 2.0
        return H

    return u, hessian


def _gaussian_probe(grid: GridSpec):
    """exp(-|x|^2), carried outside the box by its own formula."""

    def fn(pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.exp(-np.sum(pts * pts, axis=1))

    nodes = grid.nodes().reshape(-1, grid.n)
    vals = fn(nodes).reshape(grid.shape)
    # analytic closure: values exact at every exterior point, pairs
    # decay to zero, sup beyond the box is the boundary value
    clo = _Derived(fn, float(np.exp(-grid.extent ** 2)))
    u = GridFunction(grid, vals, clo, check=False)

    def hessian(x):
        x = np.asarray(x, dtype=float)
        return ((4.0 * np.outer(x, x) - 2.0 * np.eye(x.size))
                * np.exp(-float(np.sum(x * x))))

    return u, hessian


_PROBES = {"cutquad": _cutquad_probe, "gaussian": _gaussian_probe}


def calibrate_cn(n: int, grid: GridSpec | None = None, quad=None) -> float:
    """Measure c_n so the isotropic kernel tends to the Laplacian.

    Evaluates the kernel operator on the cutquad probe at the origin for
    a short ladder of orders closing on 2 (gaps 4e-3, 2e-3, 1e-3) and
    returns 2 / value at the last order, the constant that sends the
    operator to Delta u(0) = 2.  The sweep must contract: consecutive
    increments of the constant have to shrink, otherwise the quadrature
    is not resolving the limit and the calibration is rejected.
    """
    n = int(n)
    if n < 1:
        raise LimitError(f"n must be a positive integer, got {n}")
    if grid is None:
        grid = _default_grid(n)
    if grid.n != n:
        raise LimitError(f"grid has dimension {grid.n}, expected {n}")
    u, _ = _cutquad_probe(grid)
    x0 = np.zeros(n)
    cs = []
    for sig in _CAL_SIGMAS:
        val = apply(linear_operator(fractional_kernel(n, sig)), u, x0,
                    quad=quad)
        if not np.isfinite(val) or val <= 0.0:
            raise LimitError(
                f"calibration value at sigma = {sig} is {val!r}; "
                "expected a positive operator value")
        cs.append(_CAL_TARGET / val)
    d1 = abs(cs[1] - cs[0])
    d2 = abs(cs[2] - cs[1])
    if d2 > 0.75 * d1 + 1e-12:
        raise LimitError(
            "calibration sweep did not converge: increments "
            f"{d1:.3g} then {d2:.3g}")
    return cs[-1]


@dataclass(frozen=True)
class LimitReport:
    """Measured gap to the second order limit along a sigma ladder."""

    sigmas: tuple
    errors: tuple
    c_n: float
    tol: float
    decreasing: bool
    passed: bool

    def __post_init__(self):
        sig = np.asarray(self.sigmas, dtype=float)
        err = np.asarray(self.errors, dtype=float)
        if sig.size == 0:
            raise LimitError("a report needs at least one sigma")
        if sig.size != err.size:
            raise LimitError(
                f"{sig.size} sigmas but {err.size} errors")
        if np.any(sig <= 0.0) or np.any(sig >= 2.0):
            raise LimitError("every sigma must lie in (0, 2)")
        if np.any(np.diff(sig) <= 0.0):
            raise LimitError("sigma ladder must increase strictly toward 2")
        if not np.all(np.isfinite(err)) or np.any(err < 0.0):
            raise LimitError("errors must be finite and nonnegative")
        if not (np.isfinite(self.c_n) and self.c_n > 0.0):
            raise LimitError(f"c_n must be positive, got {self.c_n}")
        if not (np.isfinite(self.tol) and self.tol > 0.0):
            raise LimitError(f"tol must be positive, got {self.tol}")
        object.__setattr__(self, "sigmas", tuple(float(s) for s in sig))
        object.__setattr__(self, "errors", tuple(float(e) for e in err))
        object.__setattr__(self, "c_n", float(self.c_n))
        object.__setattr__(self, "tol", float(self.tol))


def _limit_multiplier(A: np.ndarray, sigma: float, c_n: float):
    """Direction multiplier of the change-of-variables kernel, with its
    exact eigenvalue bounds (cushioned for the kernel's range check)."""
    n = A.shape[0]
    eigs = np.linalg.eigvalsh(A)
    det = float(np.prod(eigs))
    Ainv = np.linalg.inv(A)

    def mult(pts):
        q = np.atleast_2d(np.asarray(pts, dtype=float))
        r = np.linalg.norm(q, axis=1)
        th = q / r[:, None]
        return c_n / (det * np.linalg.norm(th @ Ainv.T, axis=1) ** (n + sigma))

    lo = c_n * float(eigs[0]) ** (n + sigma) / det * (1.0 - 1e-9)
    hi = c_n * float(eigs[-1]) ** (n + sigma) / det * (1.0 + 1e-9)
    return mult, lo, hi


def sigma_limit_error(u, A, sigmas, grid: GridSpec | None = None, quad=None,
                      c_n: float | None = None, points=None,
                      tol: float = 1e-2) -> LimitReport:
    """Gap between the kernel operator and its second order limit.

    ``u`` is either a probe name (``"gaussian"`` or ``"cutquad"``) or a
    pair ``(grid function, hessian)`` where the hessian callable returns
    the n x n matrix of second derivatives at a point.  For each sigma
    in the ladder the change-of-variables kernel operator built from the
    positive matrix ``A`` is evaluated at the probe points and compared
    against sum_ij a_ij d_ij u with a = A A^T; the report records the
    worst absolute gap per sigma.  ``passed`` requires the gaps to
    decrease along the ladder and the final gap to be at most ``tol``.

    ``c_n`` defaults to a fresh calibration on the probe's grid, and
    ``points`` to a small node set near the origin (inside the cutquad
    plateau).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise LimitError(f"A must be a square matrix, got shape {A.shape}")
    if not np.allclose(A, A.T, rtol=0.0, atol=1e-12):
        raise LimitError("A must be symmetric")
    eigs = np.linalg.eigvalsh(A)
    if eigs[0] <= 0.0:
        raise LimitError(
            f"A must be positive definite; eigenvalues {eigs.tolist()}")
    n = A.shape[0]

    sig_arr = np.atleast_1d(np.asarray(sigmas, dtype=float))
    if sig_arr.size == 0:
        raise LimitError("sigma ladder must be nonempty")
    if np.any(sig_arr <= 0.0) or np.any(sig_arr >= 2.0):
        raise LimitError("every sigma must lie in (0, 2)")
    if np.any(np.diff(sig_arr) <= 0.0):
        raise LimitError("sigma ladder must increase strictly toward 2")

    if isinstance(u, str):
        if u not in _PROBES:
            names = ", ".join(sorted(_PROBES))
            raise LimitError(f"unknown probe {u!r}; choose one of {names}")
        if grid is None:
            grid = _default_grid(n)
        if grid.n != n:
            raise LimitError(
                f"A is {n}x{n} but the grid has dimension {grid.n}")
        probe, hessian = _PROBES[u](grid)
    else:
        try:
            probe, hessian = u
        except (TypeError, ValueError):
            raise LimitError(
                "probe must be a name or a (grid function, hessian) pair")
        if not isinstance(probe, GridFunction) or not callable(hessian):
            raise LimitError(
                "probe must be a name or a (grid function, hessian) pair")
        if grid is not None:
            raise LimitError(
                "grid only applies to named probes; a grid function "
                "fixes its own")
        if probe.spec.n != n:
            raise LimitError(
                f"A is {n}x{n} but the probe lives in dimension "
                f"{probe.spec.n}")
        grid = probe.spec

    if points is None:
        if n not in _DEFAULT_POINTS:
            raise LimitError(
                f"no default probe points for n = {n}; pass points")
        points = _DEFAULT_POINTS[n]
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if n == 1 and pts.shape[0] == 1 and pts.shape[1] > 1:
        pts = pts.T
    if pts.shape[1] != n:
        raise LimitError(
            f"points must have {n} components each, got shape {pts.shape}")

    if c_n is None:
        c_n = calibrate_cn(n, grid=grid, quad=quad)
    c_n = float(c_n)
    if not (np.isfinite(c_n) and c_n > 0.0):
        raise LimitError(f"c_n must be positive, got {c_n}")

    a_mat = A @ A.T
    targets = np.array([float(np.sum(a_mat * hessian(x))) for x in pts])

    errors = []
    for sig in sig_arr:
        mult, lo, hi = _limit_multiplier(A, float(sig), c_n)
        kern = fractional_kernel(n, float(sig), lam=lo, Lam=hi,
                                 multiplier=mult)
        op = linear_operator(kern)
        gaps = [abs(apply(op, probe, x, quad=quad) - t)
                for x, t in zip(pts, targets)]
        err = float(max(gaps))
        if not np.isfinite(err):
            raise LimitError(
                f"operator gap at sigma = {float(sig)} is not finite")
        errors.append(err)

    decreasing = all(errors[k + 1] < errors[k] + _LADDER_SLACK
                     for k in range(len(errors) - 1))
    passed = decreasing and errors[-1] <= float(tol)
    return LimitReport(sigmas=tuple(float(s) for s in sig_arr),
                       errors=tuple(errors), c_n=c_n, tol=float(tol),
                       decreasing=decreasing, passed=passed)
