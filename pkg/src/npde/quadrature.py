"""Lattice quadrature plans for nonlocal operator evaluation.

An operator value at a grid node is assembled from three radial zones,
split at r0 (default h) and R_mid = pad * h:

* near, r < r0: quadratic model delta ~ (theta' H theta) r^2; the radial
  integral of (2 - sigma) r^(-1-sigma) * r^2 is exactly r0^(2-sigma), so
  only an angular rule is needed;
* mid, r0 <= r <= R_mid: lattice cells with exact reference masses for the
  radial profile (2 - sigma) r^(-n-sigma), lumped onto nodes;
* tail, r > R_mid: radial integrals per sphere direction.

Masses here are "unit" masses: direction multipliers and ellipticity
factors are applied by the operator code on top, and they are single-sided
(each offset y counted once; the pair at -y contributes a factor 2 in the
operator). Plans are immutable and cached on (n, h, sigma, r0, pad,
n_theta).

Mid-field cell masses are exact rather than midpoint h^n K(y_c):

* 1D: the mass of a clipped cell [kh - h/2, kh + h/2] is lumped onto the
  two lattice radii bracketing its mean of t = r^2 (the coordinate of the
  quadratic model), preserving mass and t-mean with nonnegative weights;
* 2D: cells near the singularity or cut by r0 / R_mid get polar-exact
  masses (angular Gauss-Legendre between breakpoints where the radial slab
  changes shape, closed-form radial integral); far cells use the midpoint
  value with the Taylor correction 1 + h^2 beta^2 / (24 r^2), beta = n +
  sigma.
"""

import math
from collections import OrderedDict
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=32)
def _leg(npts):
    x, w = np.polynomial.legendre.leggauss(npts)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def sphere_rule(n, n_theta):
    """Directions and weights integrating over the unit sphere.

    1D: the two points +-1 with weight 1 each. 2D: n_theta equi-spaced
    angles offset by half a step (no direction ever lies exactly on a
    coordinate axis), weight 2 pi / n_theta.
    """
    if n == 1:
        dirs = np.array([[1.0], [-1.0]])
        w = np.array([1.0, 1.0])
    else:
        ang = (np.arange(n_theta) + 0.5) * (2.0 * np.pi / n_theta)
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        w = np.full(n_theta, 2.0 * np.pi / n_theta)
    dirs.setflags(write=False)
    w.setflags(write=False)
    return dirs, w


def ray_tail_mass(sigma, R):
    """integral_R^inf (2 - sigma) r^(-1-sigma) dr (unit radial profile)."""
    return (2.0 - sigma) * R ** -sigma / sigma


def ray_power_mass(sigma, p, R):
    """integral_R^inf r^(-p) (2 - sigma) r^(-1-sigma) dr."""
    return (2.0 - sigma) * R ** (-sigma - p) / (sigma + p)


def ray_integral_decades(fun, R, rel_tol=1e-13, npts=64, max_decades=40):
    """integral_R^inf fun(r) dr by Gauss-Legendre panels per radial decade.

    Stops after two consecutive decades contribute less than rel_tol of
    the running total in absolute value. fun must be vectorized.
    """
    xg, wg = _leg(npts)
    total = 0.0
    quiet = 0
    for d in range(max_decades):
        a = R * 10.0 ** d
        b = 10.0 * a
        half = 0.5 * (b - a)
        r = 0.5 * (a + b) + half * xg
        c = float(np.sum(half * wg * np.asarray(fun(r), dtype=float)))
        total += c
        if abs(c) <= rel_tol * max(abs(total), 1e-300):
            quiet += 1
            if quiet >= 2:
                break
        else:
            quiet = 0
    return total


def weights_1d(h, pad, sigma, r0):
    """Single-sided node weights and cell measures on {h, 2h, ..., pad h}.

    Returns (w, meas), both shape (pad + 1,) indexed by the lattice step k
    (index 0 unused, zero). w carries the mass of (2 - sigma) r^(-1-sigma)
    over [r0, pad h] lumped onto nodes; meas[k] is the plain length of
    cell k clipped to the window (for bounded kernel parts integrated by
    midpoint rule).
    """
    w = np.zeros(pad + 1)
    meas = np.zeros(pad + 1)
    R_far = pad * h
    for k in range(1, pad + 1):
        a = max(k * h - 0.5 * h, r0)
        b = min(k * h + 0.5 * h, R_far)
        if b <= a:
            continue
        meas[k] = b - a
        m0 = (2.0 - sigma) / sigma * (a ** -sigma - b ** -sigma)
        # mean of t = r^2 over the cell; lump onto the bracketing nodes in
        # the t coordinate so a quadratic profile is integrated exactly
        tb = (b ** (2.0 - sigma) - a ** (2.0 - sigma)) / m0
        kk = k if tb >= (k * h) ** 2 else k - 1
        if kk < 1:
            w[1] += m0
            continue
        if kk + 1 > pad:
            w[kk] += m0
            continue
        tlo = (kk * h) ** 2
        thi = ((kk + 1) * h) ** 2
        lam = (tb - tlo) / (thi - tlo)
        w[kk] += (1.0 - lam) * m0
        w[kk + 1] += lam * m0
    return w, meas


def _cell_polar(a1, b1, a2, b2, rlo, rhi, sigma):
    """Mass and area of [a1,b1] x [a2,b2] inside the annulus rlo <= r <= rhi.

    Mass is against (2 - sigma) r^(-2-sigma). The cell must satisfy
    0 < a1 and 0 <= a2 (callers fold axis cells). Angular Gauss-Legendre
    between breakpoints (cell corners, circle-edge intersections); the
    radial integral per angle is closed form.
    """
    cuts = {math.atan2(a2, b1), math.atan2(b2, a1),
            math.atan2(a2, a1), math.atan2(b2, b1)}
    th_lo = math.atan2(a2, b1)
    th_hi = math.atan2(b2, a1)
    for r in (rlo, rhi):
        if r <= 0.0:
            continue
        for xx in (a1, b1):
            if 0.0 < xx < r:
                yy = math.sqrt(r * r - xx * xx)
                if a2 <= yy <= b2:
                    cuts.add(math.atan2(yy, xx))
        for yy in (a2, b2):
            if 0.0 <= yy < r:
                xx = math.sqrt(r * r - yy * yy)
                if a1 <= xx <= b1:
                    cuts.add(math.atan2(yy, xx))
    edges = sorted(t for t in cuts if th_lo - 1e-15 <= t <= th_hi + 1e-15)
    xg, wg = _leg(16)
    mass = 0.0
    area = 0.0
    for t0, t1 in zip(edges[:-1], edges[1:]):
        if t1 - t0 < 1e-15:
            continue
        half = 0.5 * (t1 - t0)
        th = 0.5 * (t0 + t1) + half * xg
        cs = np.cos(th)
        sn = np.sin(th)
        sn_safe = np.maximum(sn, 1e-300)
        lo = np.maximum(a1 / cs, rlo)
        if a2 > 0.0:
            lo = np.maximum(lo, a2 / sn_safe)
        hi = np.minimum(np.minimum(b1 / cs, b2 / sn_safe), rhi)
        good = hi > lo
        if not np.any(good):
            continue
        A = lo[good]
        B = hi[good]
        ww = wg[good] * half
        mass += float(np.sum(ww * (2.0 - sigma) / sigma
                             * (A ** -sigma - B ** -sigma)))
        area += float(np.sum(ww * 0.5 * (B * B - A * A)))
    return mass, area


def masses_2d(h, pad, sigma, r0):
    """Single-sided cell masses and measures on the (2 pad + 1)^2 lattice.

    Returns (w, meas) indexed by offsets [-pad..pad]^2 (origin zero). Cells
    near the singularity or straddling r0 / R_far = pad h are polar-exact
    and clipped to the annulus; the rest use the corrected midpoint rule.
    """
    k = np.arange(-pad, pad + 1)
    I, J = np.meshgrid(k, k, indexing="ij")
    AI = np.abs(I)
    AJ = np.abs(J)
    rmin = np.hypot(np.maximum(AI - 0.5, 0.0), np.maximum(AJ - 0.5, 0.0)) * h
    rmax = np.hypot(AI + 0.5, AJ + 0.5) * h
    R_far = pad * h
    live = (rmax > r0) & (rmin < R_far)
    live[pad, pad] = False
    exact = live & ((rmin < max(4.0 * h, r0 + 2.0 * h)) | (rmax > R_far))
    plain = live & ~exact

    w = np.zeros(I.shape)
    meas = np.zeros(I.shape)
    r2 = (I.astype(float) ** 2 + J.astype(float) ** 2) * (h * h)
    beta = 2.0 + sigma
    r2_safe = np.where(plain, r2, 1.0)
    kv = (2.0 - sigma) * r2_safe ** (-0.5 * beta)
    corr = 1.0 + h * h * beta * beta / (24.0 * r2_safe)
    w[plain] = (h * h) * kv[plain] * corr[plain]
    meas[plain] = h * h

    cache = {}
    for i, j in zip(*np.nonzero(exact)):
        ii = abs(int(i) - pad)
        jj = abs(int(j) - pad)
        a, b = (ii, jj) if ii >= jj else (jj, ii)
        got = cache.get((a, b))
        if got is None:
            a1 = a * h - 0.5 * h
            b1 = a * h + 0.5 * h
            a2 = b * h - 0.5 * h
            b2 = b * h + 0.5 * h
            if a2 < 0.0:
                # axis cell, symmetric about the axis: fold and double
                m, ar = _cell_polar(a1, b1, 0.0, b2, r0, R_far, sigma)
                got = (2.0 * m, 2.0 * ar)
            else:
                got = _cell_polar(a1, b1, a2, b2, r0, R_far, sigma)
            cache[(a, b)] = got
        w[i, j], meas[i, j] = got
    return w, meas


class QuadraturePlan:
    """Frozen quadrature data for one (n, h, sigma, r0, pad, n_theta).

    Attributes
    ----------
    dirs, w_sph : sphere rule (S, n) and (S,)
    near_pts : dirs * (r0 / 2), where direction multipliers are sampled
        for the near field
    off_half, pts_half, w_half, meas_half : canonical half lattice of mid
        offsets (one of each antipodal pair), integer offsets, points,
        unit masses, cell measures
    w_node, meas_node : (1D only) weights indexed by lattice step
    w_full, meas_full : (2D only) full-lattice arrays for convolutions
    kernel_cache : mutable per-kernel scratch, managed by the operators
    """

    def __init__(self, n, h, sigma, r0, pad, n_theta):
        self.n = int(n)
        self.h = float(h)
        self.sigma = float(sigma)
        self.r0 = float(r0)
        self.pad = int(pad)
        self.n_theta = int(n_theta)
        self.R_mid = self.pad * self.h
        self.dirs, self.w_sph = sphere_rule(self.n, self.n_theta)
        self.near_pts = self.dirs * (0.5 * self.r0)
        self.near_pts.setflags(write=False)
        if self.n == 1:
            w, meas = weights_1d(self.h, self.pad, self.sigma, self.r0)
            self.w_node = w
            self.meas_node = meas
            self.off_half = np.arange(1, self.pad + 1)[:, None]
            self.w_half = w[1:].copy()
            self.meas_half = meas[1:].copy()
        else:
            w, meas = masses_2d(self.h, self.pad, self.sigma, self.r0)
            self.w_full = w
            self.meas_full = meas
            k = np.arange(-self.pad, self.pad + 1)
            I, J = np.meshgrid(k, k, indexing="ij")
            half = (J > 0) | ((J == 0) & (I > 0))
            self.off_half = np.stack([I[half], J[half]], axis=1)
            self.w_half = w[half]
            self.meas_half = meas[half]
        self.pts_half = self.off_half * self.h
        for arr in (self.off_half, self.pts_half, self.w_half,
                    self.meas_half):
            arr.setflags(write=False)
        if self.n == 1:
            self.w_node.setflags(write=False)
            self.meas_node.setflags(write=False)
        else:
            self.w_full.setflags(write=False)
            self.meas_full.setflags(write=False)
        self.kernel_cache = {}


_PLAN_CACHE = OrderedDict()
_PLAN_CACHE_SIZE = 4


def get_plan(n, h, sigma, r0, pad, n_theta):
    key = (int(n), float(h), float(sigma), float(r0), int(pad), int(n_theta))
    plan = _PLAN_CACHE.get(key)
    if plan is None:
        plan = QuadraturePlan(*key)
        _PLAN_CACHE[key] = plan
        while len(_PLAN_CACHE) > _PLAN_CACHE_SIZE:
            _PLAN_CACHE.popitem(last=False)
    else:
        _PLAN_CACHE.move_to_end(key)
    return plan
