"""Concave envelopes, contact sets, and the dyadic cube machinery.

The chain implemented here: a grid function u that is nonpositive outside
B_1 gets a concave envelope Gamma built over B_3 from its graph on B_2
plus a ring of zeros on B_3 \\ B_2.  The contact set {u = Gamma} carries a
gradient-image (superdifferential) measure, and a split-and-discard cube
decomposition of B_1 bounds that measure by a Riemann sum of the right
hand side f over the cubes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import NpdeError
from .grid import GridFunction, GridSpec, zero_closure

__all__ = [
    "EnvelopeError",
    "EnvelopeResult",
    "CubeRecord",
    "CubeDecomposition",
    "concave_envelope",
    "ring_estimate",
    "initial_cube_diameter",
    "cube_decompose",
    "abp_bound",
]

# Fixed-point tolerance for the concavification sweeps, relative to sup|u|.
SWEEP_TOL = 1e-10
# Contact detection tolerance, relative to sup|u|.
CONTACT_TOL = 1e-8


class EnvelopeError(NpdeError, ValueError):
    """Envelope or decomposition contract violation."""


@dataclass(frozen=True)
class EnvelopeResult:
    """Concave envelope of a grid function over B_3.

    gamma is zero at every node outside B_3 and carries a zero exterior
    closure; contact_mask flags nodes where gamma - u <= CONTACT_TOL * sup|u|;
    grad_gamma holds central differences of gamma, shape grid.shape + (n,).
    """

    gamma: GridFunction
    contact_mask: np.ndarray
    grad_gamma: np.ndarray

    def __post_init__(self):
        self.contact_mask.setflags(write=False)
        self.grad_gamma.setflags(write=False)


def _ball_mask(spec: GridSpec, r: float) -> np.ndarray:
    return spec.node_radii() <= r + 1e-12 * max(spec.h, 1.0)


def _upper_hull_line(vals: np.ndarray) -> np.ndarray:
    """Smallest concave majorant of a sequence on its integer lattice.

    Monotone-chain upper hull of the points (i, vals[i]), filled back in by
    linear interpolation between hull vertices.  Exact in the sense that the
    output touches the input at every hull vertex.
    """
    npts = vals.shape[0]
    if npts <= 2:
        return vals.copy()
    stack = np.empty(npts, dtype=np.int64)
    top = -1
    for i in range(npts):
        yi = vals[i]
        while top >= 1:
            a = stack[top - 1]
            b = stack[top]
            # drop b when it sits on or below the chord a--i
            if (vals[b] - vals[a]) * (i - a) <= (yi - vals[a]) * (b - a):
                top -= 1
            else:
                break
        top += 1
        stack[top] = i
    out = np.empty(npts)
    for t in range(top):
        a = int(stack[t])
        b = int(stack[t + 1])
        w = np.arange(b - a + 1) / (b - a)
        out[a:b + 1] = vals[a] + (vals[b] - vals[a]) * w
    out[int(stack[top])] = vals[int(stack[top])]
    return out


def _segment_runs(mask: np.ndarray):
    """Start/stop of the single contiguous True run of a 1D mask (or None)."""
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        return None
    return int(idx[0]), int(idx[-1]) + 1


def _line_index_sets(mask3: np.ndarray):
    """Index arrays for the rows, columns and both diagonals of the in-B3
    region, each restricted to its contiguous run inside the disc."""
    P, Q = mask3.shape
    lines = []
    for i in range(P):
        run = _segment_runs(mask3[i, :])
        if run and run[1] - run[0] >= 2:
            jj = np.arange(run[0], run[1])
            lines.append((np.full(jj.shape, i), jj))
    for j in range(Q):
        run = _segment_runs(mask3[:, j])
        if run and run[1] - run[0] >= 2:
            ii = np.arange(run[0], run[1])
            lines.append((ii, np.full(ii.shape, j)))
    for off in range(-P + 1, Q):
        ii = np.arange(max(0, -off), min(P, Q - off))
        jj = ii + off
        sub = mask3[ii, jj]
        run = _segment_runs(sub)
        if run and run[1] - run[0] >= 2:
            lines.append((ii[run[0]:run[1]], jj[run[0]:run[1]]))
    for s in range(0, P + Q - 1):
        ii = np.arange(max(0, s - Q + 1), min(P, s + 1))
        jj = s - ii
        sub = mask3[ii, jj]
        run = _segment_runs(sub)
        if run and run[1] - run[0] >= 2:
            lines.append((ii[run[0]:run[1]], jj[run[0]:run[1]]))
    return lines


def _pair_averages_2d(work: np.ndarray):
    """Max over axis/diagonal pair averages, -inf where a neighbor leaves
    the region (work is -inf outside it, which drops that pair from the
    max automatically)."""
    big = np.full((work.shape[0] + 2, work.shape[1] + 2), -np.inf)
    big[1:-1, 1:-1] = work
    best = 0.5 * (big[:-2, 1:-1] + big[2:, 1:-1])
    np.maximum(best, 0.5 * (big[1:-1, :-2] + big[1:-1, 2:]), out=best)
    np.maximum(best, 0.5 * (big[:-2, :-2] + big[2:, 2:]), out=best)
    np.maximum(best, 0.5 * (big[:-2, 2:] + big[2:, :-2]), out=best)
    return best


def concave_envelope(u: GridFunction, check: bool = True) -> EnvelopeResult:
    """Concave envelope of u over B_3 with contact set and gradient field.

    The envelope majorizes the graph of u on B_2 nodes together with a ring
    of zeros on B_3 \\ B_2 and vanishes outside B_3.  In 1D the upper hull
    is computed exactly by a monotone chain.  In 2D alternating-direction
    hull passes converge monotonically from below and the local
    concavification sweep (replace Gamma(x) by the max of the data value
    and the largest axis/diagonal midpoint average) certifies the fixed
    point to SWEEP_TOL * sup|u|.

    With check=True the hypothesis u <= 0 outside B_1 is enforced on nodes
    and, when the exterior closure is not identically zero, on sampled
    closure points.
    """
    spec = u.spec
    sup = u.sup_norm()
    if check:
        _check_nonpositive_outside_b1(u)

    mask3 = _ball_mask(spec, 3.0)
    mask2 = _ball_mask(spec, 2.0)
    data = np.where(mask2, u.values, 0.0)

    if spec.n == 1:
        run = _segment_runs(mask3)
        seg = _upper_hull_line(data[run[0]:run[1]])
        gvals = np.zeros(spec.shape)
        gvals[run[0]:run[1]] = seg
    else:
        gvals = _envelope_2d(spec, data, mask3, sup)

    gamma = GridFunction(spec, gvals, zero_closure(), check=False)
    contact = (gvals - u.values) <= CONTACT_TOL * max(sup, 1e-300)
    grads = np.gradient(gvals, spec.h)
    if spec.n == 1:
        grad = np.asarray(grads)[:, None]
    else:
        grad = np.stack(grads, axis=-1)
    return EnvelopeResult(gamma=gamma, contact_mask=contact, grad_gamma=grad)


def _check_nonpositive_outside_b1(u: GridFunction) -> None:
    spec = u.spec
    outside = ~_ball_mask(spec, 1.0)
    bad = outside & (u.values > 0.0)
    if np.any(bad):
        nodes = spec.nodes().reshape(spec.shape + (spec.n,))
        worst = np.argwhere(bad)[:8]
        listing = ", ".join(
            f"x={nodes[tuple(ix)].tolist()} u={u.values[tuple(ix)]:.6g}"
            for ix in worst
        )
        raise EnvelopeError(
            f"envelope needs u <= 0 outside B_1; {int(bad.sum())} node(s) "
            f"violate it, first: {listing}"
        )
    if u.ext_bound > 0.0:
        # the closure bound alone cannot certify a sign, so probe it
        rr = spec.extent * np.array([1.0 + 1e-9, 1.5, 2.0, 4.0, 8.0])
        if spec.n == 1:
            pts = np.concatenate([rr, -rr])[:, None]
        else:
            th = np.linspace(0.0, 2.0 * np.pi, 17)[:-1]
            dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
            pts = (rr[:, None, None] * dirs[None, :, :]).reshape(-1, 2)
        vals = u.closure.values(pts)
        if np.any(vals > 0.0):
            k = int(np.argmax(vals))
            raise EnvelopeError(
                f"envelope needs u <= 0 outside B_1; exterior closure is "
                f"positive at x={pts[k].tolist()} (value {vals[k]:.6g})"
            )


def _envelope_2d(spec: GridSpec, data: np.ndarray, mask3: np.ndarray,
                 sup: float) -> np.ndarray:
    tol = SWEEP_TOL * max(sup, 1e-300)
    k3 = int(math.floor(3.0 / spec.h + 1e-9))
    m = spec.m
    sl = slice(m - k3, m + k3 + 1)
    cm = mask3[sl, sl]
    cd = data[sl, sl].copy()
    cd[~cm] = 0.0

    work = np.where(cm, cd, -np.inf)
    lines = _line_index_sets(cm)

    # alternating-direction hull passes: monotone increase toward the
    # smallest majorant concave along every axis and diagonal grid line
    for _ in range(200):
        delta = 0.0
        for ii, jj in lines:
            old = work[ii, jj]
            new = _upper_hull_line(old)
            d = float(np.max(new - old))
            if d > delta:
                delta = d
            work[ii, jj] = new
        if delta <= 0.1 * tol:
            break

    # local concavification sweep: certifies the fixed point of
    # Gamma(x) = max(data(x), max over pair midpoint averages)
    for _ in range(5000):
        best = _pair_averages_2d(work)
        new = np.where(cm, np.maximum(cd, np.maximum(work, best)), -np.inf)
        delta = float(np.max(new[cm] - work[cm]))
        work = new
        if delta <= tol:
            break
    else:
        raise EnvelopeError("concavification sweeps did not reach a fixed point")

    out = np.zeros(spec.shape)
    out[sl, sl] = np.where(cm, work, 0.0)
    return out


def ring_estimate(u: GridFunction, env: EnvelopeResult, x, f_x: float,
                  M: float, sigma: float, C0: float = 10.0):
    """Smallest dyadic ring around a contact node on which the sub-plane
    set has node fraction at most C0 * f_x / M.

    Rings are R_k = B_{r_k}(x) \\ B_{r_{k+1}}(x) with
    r_k = rho0 * 2**(-1/(2-sigma) - k), rho0 = 1/(8 sqrt n).  A ring counts
    as resolvable while r_{k+1} >= 2h.  Returns (k, ratio) for the first
    passing ring, or (-1, smallest observed ratio) when none passes.
    """
    spec = u.spec
    idx = spec.index_of(x)
    if not env.contact_mask[idx]:
        raise EnvelopeError(f"{list(np.atleast_1d(x))} is not a contact node")
    if not (M > 0.0 and math.isfinite(M)):
        raise EnvelopeError(f"ring estimate needs M > 0, got {M}")
    if not (0.0 < sigma < 2.0):
        raise EnvelopeError(f"sigma must lie in (0,2), got {sigma}")

    xv = np.asarray(x, dtype=float).reshape(spec.n)
    rho0 = 1.0 / (8.0 * math.sqrt(spec.n))
    base = rho0 * 2.0 ** (-1.0 / (2.0 - sigma))
    grad = env.grad_gamma[idx]
    nodes = spec.nodes()
    dist = np.linalg.norm(nodes - xv[None, :], axis=1)
    planes = u.value_at(xv) + (nodes - xv[None, :]) @ grad
    uvals = u.values.ravel()

    threshold = C0 * f_x / M
    best = math.inf
    k = 0
    while True:
        rk = base * 2.0 ** (-k)
        rk1 = 0.5 * rk
        if rk1 < 2.0 * spec.h:
            break
        ring = (dist > rk1) & (dist <= rk)
        total = int(ring.sum())
        if total == 0:
            break
        bad = ring & (uvals < planes - M * rk * rk)
        ratio = float(bad.sum()) / total
        if ratio < best:
            best = ratio
        if ratio <= threshold:
            return k, ratio
        k += 1
    if not math.isfinite(best):
        raise EnvelopeError(
            f"no ring around {xv.tolist()} is resolvable at h={spec.h}; "
            f"need r_1 = {base / 2:.4g} >= 2h, use a smaller h"
        )
    return -1, best


def initial_cube_diameter(sigma: float, n: int) -> float:
    """Top-level tiling diameter rho0 * 2**(-1/(2-sigma))."""
    rho0 = 1.0 / (8.0 * math.sqrt(n))
    return rho0 * 2.0 ** (-1.0 / (2.0 - sigma))


@dataclass(frozen=True)
class CubeRecord:
    center: tuple
    diameter: float
    level: int
    maxf: float
    passes_e: bool
    passes_f: bool


@dataclass
class CubeDecomposition:
    """Dyadic cube family covering the contact set inside B_1.

    C and mu hold the measured extremes: the smallest C and the largest mu
    that would certify every emitted cube; C_used / mu_used are the values
    the pass flags were computed with.
    """

    cubes: list = field(default_factory=list)
    rho0: float = 0.0
    sigma: float = 0.0
    C: float = 0.0
    mu: float = 0.0
    C_used: float = 0.0
    mu_used: float = 0.0
    max_depth: int = 0
    depth_reached: int = 0

    def all_pass(self) -> bool:
        return all(c.passes_e and c.passes_f for c in self.cubes)


def _image_measure(grads: np.ndarray, h_g: float) -> float:
    """Occupancy-binned measure of a set of gradient vectors."""
    if grads.shape[0] == 0:
        return 0.0
    cells = np.floor(grads / h_g).astype(np.int64)
    n = grads.shape[1]
    return float(np.unique(cells, axis=0).shape[0]) * h_g ** n


def cube_decompose(u: GridFunction, env: EnvelopeResult, f: GridFunction,
                   sigma: float, max_depth: int, C: float = 10.0,
                   mu: float = 0.01) -> CubeDecomposition:
    """Split-and-discard cube decomposition of B_1 over the contact set.

    Tiles B_1 with cubes of diameter initial_cube_diameter(sigma, n),
    discards cubes whose closure misses the contact set, tests each
    survivor for the gradient-image bound (e) and the neighborhood mass
    bound (f) with the supplied constants, splits failures into 2^n
    half-diameter children, and stops when every cube passes or the depth
    reaches max_depth.  Failure flags survive in the result; no exception.
    """
    spec = u.spec
    if f.spec != spec:
        raise EnvelopeError("u and f live on different grids")
    if np.any(f.values < 0.0):
        raise EnvelopeError("cube decomposition needs f >= 0 at nodes")
    if not (0.0 < sigma < 2.0):
        raise EnvelopeError(f"sigma must lie in (0,2), got {sigma}")

    n = spec.n
    h = spec.h
    snap = 1e-12 * max(h, 1.0)
    rho0 = 1.0 / (8.0 * math.sqrt(n))
    d0 = initial_cube_diameter(sigma, n)
    s0 = d0 / math.sqrt(n)

    radii = spec.node_radii().ravel()
    nodes = spec.nodes()
    # the tiling only covers B_1, so restrict node scans to a box around it
    near = np.max(np.abs(nodes), axis=1) <= 1.0 + (2.0 * math.sqrt(n) + 1.0) * s0
    near_nodes = nodes[near]
    near_u = u.values.ravel()[near]
    near_g = env.gamma.values.ravel()[near]
    near_f = np.maximum(f.values.ravel()[near], 0.0)
    contact_pts = nodes[env.contact_mask.ravel() & (radii <= 1.0 + snap)]

    def closure_hits_contact(c, s):
        if contact_pts.shape[0] == 0:
            return False
        return bool(np.any(np.all(np.abs(contact_pts - c) <= s / 2 + snap,
                                  axis=1)))

    def grade(c, s):
        """Run tests (e) and (f) on the cube of side s at center c."""
        half = s / 2 + snap
        inside = np.all(np.abs(near_nodes - c) <= half, axis=1)
        vol = s ** n
        d = s * math.sqrt(n)
        if np.any(inside):
            maxf = float(np.max(near_f[inside]))
        else:
            maxf = float(max(f.eval(c.reshape(1, n))[0], 0.0))
        img = _image_measure(env.grad_gamma.reshape(-1, n)[near][inside], h)
        cap_e = maxf ** n * vol
        passes_e = img <= C * cap_e + 1e-12
        req_e = 0.0 if img == 0.0 else (img / cap_e if cap_e > 0 else math.inf)

        big = np.all(np.abs(near_nodes - c) <= (4.0 * math.sqrt(n) * s) / 2
                     + snap, axis=1)
        need = (near_g[big] - near_u[big]) / (maxf * d * d) if maxf > 0 \
            else np.where(near_g[big] - near_u[big] <= 0.0, 0.0, math.inf)
        mass = float(np.sum(need < C)) * h ** n
        passes_f = mass >= mu * vol - 1e-12
        mu_here = mass / vol
        # smallest C that still leaves mu_used * vol of mass in 4 sqrt n Q
        want = int(math.ceil(mu * vol / h ** n - 1e-9))
        if want <= 0:
            req_f = 0.0
        elif need.shape[0] >= want:
            kth = float(np.partition(need, want - 1)[want - 1])
            req_f = kth * (1.0 + 1e-12) + 1e-300
        else:
            req_f = math.inf
        return maxf, passes_e, passes_f, req_e, req_f, mu_here

    k_lo = int(math.floor((-1.0 - snap) / s0 - 0.5))
    k_hi = int(math.ceil((1.0 + snap) / s0 - 0.5))
    queue = []
    for ks in np.ndindex(*((k_hi - k_lo + 1,) * n)):
        c = np.array([(k_lo + k + 0.5) * s0 for k in ks])
        gap = np.maximum(np.abs(c) - s0 / 2, 0.0)
        if np.linalg.norm(gap) <= 1.0 + snap:
            queue.append((0, c, s0))

    cubes = []
    req_C = 0.0
    min_mu = math.inf
    depth_reached = 0
    while queue:
        level, c, s = queue.pop(0)
        depth_reached = max(depth_reached, level)
        if not closure_hits_contact(c, s):
            continue
        maxf, ok_e, ok_f, req_e, req_f, mu_here = grade(c, s)
        if (ok_e and ok_f) or level >= max_depth:
            cubes.append(CubeRecord(tuple(float(v) for v in c),
                                    s * math.sqrt(n), level, maxf, ok_e, ok_f))
            req_C = max(req_C, req_e, req_f)
            min_mu = min(min_mu, mu_here)
        else:
            for signs in np.ndindex(*((2,) * n)):
                child = c + (np.array(signs) - 0.5) * (s / 2)
                queue.append((level + 1, child, s / 2))

    cubes.sort(key=lambda r: (r.level, r.center))
    return CubeDecomposition(
        cubes=cubes, rho0=rho0, sigma=sigma,
        C=req_C, mu=(0.0 if not cubes else min_mu),
        C_used=C, mu_used=mu, max_depth=max_depth,
        depth_reached=depth_reached,
    )


def abp_bound(dec: CubeDecomposition, env: EnvelopeResult):
    """Riemann-sum bound data: gradient-image measure of the contact set
    inside B_1 against sum over cubes of (max f+)^n |Q|."""
    spec = env.gamma.spec
    n = spec.n
    snap = 1e-12 * max(spec.h, 1.0)
    contact = env.contact_mask.ravel() & (spec.node_radii().ravel() <= 1.0 + snap)
    grads = env.grad_gamma.reshape(-1, n)[contact]
    lhs = _image_measure(grads, spec.h)
    rhs = 0.0
    for cube in dec.cubes:
        side = cube.diameter / math.sqrt(n)
        rhs += cube.maxf ** n * side ** n
    return lhs, rhs
