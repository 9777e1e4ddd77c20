"""Positive subsolution construction for the minimal extremal operator.

The profile is a capped negative power: a paraboloid inside B_delta glued
C^{1,1} to |x|^{-p}, shifted so it vanishes continuously on the sphere of
radius 2 sqrt(n) and truncated to zero outside, then scaled so its minimum
over the cube Q3 = [-3/2, 3/2]^n clears 2. Outside a small ball the
minimal operator applied to this profile is nonnegative; the verifier
certifies that on an annular band by a full operator sweep, and the
builder searches the cap radius over a dyadic set until the certificate
holds at a bracket of orders.
"""

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import NpdeError
from .grid import GridFunction, GridSpec, sample_function, zero_closure
from .kernels import l0_class
from .operators import apply_sweep, extremal_operator

__all__ = [
    "BarrierError",
    "BarrierParams",
    "DELTA_SEARCH",
    "barrier_function",
    "build_phi",
    "cap_coefficients",
    "choose_p",
    "verify_subsolution",
]

# cap radii tried by build_phi, largest first
DELTA_SEARCH = (1 / 2, 1 / 4, 1 / 8, 1 / 16, 1 / 32, 1 / 64)

# a sweep minimum above -PASS_FACTOR * sup counts as a pass
PASS_FACTOR = 1e-6

_Q3_HALF = 1.5
_SCALE_TARGET = 2.0000001


class BarrierError(NpdeError, ValueError):
    """Raised for invalid profile parameters or a failed construction."""


def choose_p(n: int, lam: float, Lam: float) -> int:
    """Smallest integer exponent p >= n whose ellipticity balance
    (p + 2) lam / (2n) >= 1.1 Lam holds with 10 percent headroom."""
    if int(n) != n or n < 1:
        raise BarrierError(f"dimension must be a positive integer, got {n}")
    if not 0 < lam <= Lam:
        raise BarrierError(f"need 0 < lam <= Lam, got lam={lam}, Lam={Lam}")
    p = max(int(n), int(math.ceil(2.2 * n * Lam / lam - 2.0 - 1e-9)))
    while (p + 2.0) * lam / (2.0 * n) < 1.1 * Lam * (1.0 - 1e-12):
        p += 1
    return p


def cap_coefficients(p, delta):
    """Paraboloid cap_a + cap_b |x|^2 matching |x|^{-p} in value and
    radial slope on the sphere of radius delta."""
    cap_b = -(p / 2.0) * delta ** (-p - 2)
    cap_a = delta ** (-p) * (1.0 + p / 2.0)
    return cap_a, cap_b


@dataclass(frozen=True)
class BarrierParams:
    p: int
    delta: float
    cap_a: float
    cap_b: float
    scale: float
    sigma0: float
    psi_bound: float

    def __post_init__(self):
        if int(self.p) != self.p or self.p < 1:
            raise BarrierError(f"exponent p must be a positive integer, "
                               f"got {self.p}")
        if not 0.0 < self.delta <= 0.5:
            raise BarrierError(f"delta = {self.delta} outside (0, 1/2]")
        a, b = cap_coefficients(self.p, self.delta)
        if abs(self.cap_a - a) > 1e-9 * abs(a) \
                or abs(self.cap_b - b) > 1e-9 * abs(b):
            raise BarrierError(
                f"cap coefficients ({self.cap_a}, {self.cap_b}) do not match "
                f"the smooth-fit values ({a}, {b}) for p={self.p}, "
                f"delta={self.delta}")
        if self.scale <= 0.0:
            raise BarrierError(f"scale = {self.scale} must be positive")
        if not 0.0 < self.sigma0 < 2.0:
            raise BarrierError(f"sigma0 = {self.sigma0} outside (0, 2)")
        if not self.psi_bound >= 0.0:
            raise BarrierError(f"psi_bound = {self.psi_bound} must be >= 0")


def _profile(n, p, delta, scale):
    outer = 2.0 * math.sqrt(n)
    shift = outer ** (-p)
    cap_a, cap_b = cap_coefficients(p, delta)

    def values(pts):
        r = np.linalg.norm(np.asarray(pts, float).reshape(-1, n), axis=-1)
        out = np.zeros(r.shape)
        mid = (r >= delta) & (r < outer)
        out[mid] = r[mid] ** (-p) - shift
        cap = r < delta
        out[cap] = cap_a + cap_b * r[cap] ** 2 - shift
        return scale * out

    return values


def barrier_function(p, delta, grid, scale=1.0) -> GridFunction:
    """Sample the capped-power profile on the grid with a zero closure."""
    if not isinstance(grid, GridSpec):
        raise BarrierError("grid must be a GridSpec")
    if int(p) != p or p < 1:
        raise BarrierError(f"exponent p must be a positive integer, got {p}")
    if not 0.0 < delta <= 0.5:
        raise BarrierError(f"delta = {delta} outside (0, 1/2]")
    if scale <= 0.0:
        raise BarrierError(f"scale = {scale} must be positive")
    if grid.extent < 2.0 * math.sqrt(grid.n):
        raise BarrierError(
            f"box extent {grid.extent} does not contain the profile support "
            f"radius {2.0 * math.sqrt(grid.n)}; the zero closure would "
            f"truncate it")
    return sample_function(grid, _profile(grid.n, int(p), delta, scale),
                           zero_closure())


def _q3_minimum_radius(grid: GridSpec) -> float:
    # farthest node of the cube [-3/2, 3/2]^n: the profile is radially
    # decreasing there, so the cube minimum sits at this corner
    m = grid.h * math.floor(_Q3_HALF / grid.h + 1e-9)
    if m <= 0.0:
        raise BarrierError(f"grid h = {grid.h} leaves no node inside Q3")
    return m * math.sqrt(grid.n)


def verify_subsolution(phi: GridFunction, sigma, quad=None, *,
                       delta, lam=1.0, Lam=1.0):
    """Sweep the minimal operator over the annular verification band.

    Returns (min_value, argmin, psi_bound): the band minimum of the
    operator values and its node, and the largest negative part over the
    inner ball of radius 1/4. The profile must be nonnegative with a
    vanishing closure beyond 2 sqrt(n); outside the band that sign
    structure alone makes the operator nonnegative, so only the band
    needs quadrature.
    """
    if not isinstance(phi, GridFunction):
        raise BarrierError("phi must be a GridFunction")
    if not 0.0 < sigma < 2.0:
        raise BarrierError(f"sigma = {sigma} outside (0, 2)")
    if not 0 < lam <= Lam:
        raise BarrierError(f"need 0 < lam <= Lam, got lam={lam}, Lam={Lam}")
    n = phi.spec.n
    h = phi.spec.h
    if delta <= 0.0 or h > delta / 8.0 * (1.0 + 1e-12):
        raise BarrierError(
            f"grid too coarse for the cap: h = {h} > delta/8 = {delta / 8.0}")
    outer = 2.0 * math.sqrt(n)
    if phi.spec.extent < outer + 1.0 + h:
        raise BarrierError(
            f"box extent {phi.spec.extent} too small for the verification "
            f"band radius {outer + 1.0}")
    vals = phi.values
    if not np.all(vals >= 0.0):
        raise BarrierError("profile must be nonnegative; the far-field sign "
                           "argument needs phi >= 0 everywhere")
    radii = phi.spec.node_radii()
    support = radii >= outer - 1e-12
    if np.any(vals[support] != 0.0):
        raise BarrierError(f"profile must vanish at radii >= {outer}")
    if phi.closure.bound(outer) != 0.0:
        raise BarrierError("exterior closure must vanish beyond the box for "
                           "the far-field sign argument")

    op = extremal_operator(l0_class(n, float(sigma), float(lam), float(Lam)),
                           "minus")
    swept, ok = apply_sweep(op, phi, quad)
    band = (radii >= 0.25 + 2.0 * h) & (radii <= outer + 1.0) & ok
    if not band.any():
        raise BarrierError("verification band contains no usable nodes")
    flat = np.argmin(np.where(band, swept, np.inf))
    idx = np.unravel_index(flat, phi.spec.shape)
    min_value = float(swept[idx])
    argmin = tuple(float(phi.spec.axis()[k]) for k in idx)
    inner = (radii <= 0.25) & ok
    psi_bound = float(np.max(np.maximum(-swept[inner], 0.0), initial=0.0))
    return min_value, argmin, psi_bound


def build_phi(p, sigma0, grid, lam=1.0, Lam=1.0, quad=None):
    """Search the cap radius until the subsolution certificate holds.

    Tries DELTA_SEARCH largest-first, skipping radii the grid cannot
    resolve (h > delta/8). Each candidate is verified at sigma0, the
    midpoint (sigma0 + 2)/2, 1.9, and 1.99; the first radius passing all
    of them wins. Returns (BarrierParams, GridFunction).
    """
    if not isinstance(grid, GridSpec):
        raise BarrierError("grid must be a GridSpec")
    if not 0.0 < sigma0 < 2.0:
        raise BarrierError(f"sigma0 = {sigma0} outside (0, 2)")
    if int(p) != p or p < 1:
        raise BarrierError(f"exponent p must be a positive integer, got {p}")
    n = grid.n
    outer = 2.0 * math.sqrt(n)
    if grid.extent < outer + 1.0 + grid.h:
        raise BarrierError(
            f"box extent {grid.extent} too small for the verification band "
            f"radius {outer + 1.0}")
    corner = _q3_minimum_radius(grid)
    scale = _SCALE_TARGET / (corner ** (-p) - outer ** (-p))
    # low orders are the hard end of the bracket: fail fast there
    sigmas = sorted({float(sigma0), (float(sigma0) + 2.0) / 2.0, 1.9, 1.99})
    failures = []
    skipped = []
    for delta in DELTA_SEARCH:
        if grid.h > delta / 8.0 * (1.0 + 1e-12):
            skipped.append(delta)
            continue
        phi = barrier_function(p, delta, grid, scale)
        sup = float(np.max(phi.values))
        psi_bound = 0.0
        passed = True
        for s in sigmas:
            mv, _, pb = verify_subsolution(phi, s, quad, delta=delta,
                                           lam=lam, Lam=Lam)
            psi_bound = max(psi_bound, pb)
            if mv < -PASS_FACTOR * sup:
                failures.append((delta, s, mv, mv / sup))
                passed = False
                break
        if passed:
            q3 = np.max(np.abs(grid.nodes().reshape(grid.shape + (n,))),
                        axis=-1) <= _Q3_HALF + 1e-12
            floor = float(np.min(phi.values[q3]))
            if floor < 2.0 + 1e-8:
                raise BarrierError(
                    f"profile minimum over Q3 is {floor}, below 2; the "
                    f"scale formula does not clear the cube")
            cap_a, cap_b = cap_coefficients(p, delta)
            params = BarrierParams(p=int(p), delta=delta, cap_a=cap_a,
                                   cap_b=cap_b, scale=scale,
                                   sigma0=float(sigma0),
                                   psi_bound=psi_bound)
            return params, phi
    worst = min(failures, key=lambda f: f[3], default=None)
    detail = ""
    if worst is not None:
        detail = (f"; worst violation min = {worst[2]:.6g} "
                  f"({worst[3]:.3g} of sup) at delta={worst[0]}, "
                  f"sigma={worst[1]}")
    if skipped:
        detail += (f"; {len(skipped)} radii below grid resolution "
                   f"(need h <= delta/8, h = {grid.h})")
    raise BarrierError(
        f"no cap radius in {DELTA_SEARCH} yields a subsolution{detail}; "
        f"grid too coarse or sigma0 too small for the search set")
