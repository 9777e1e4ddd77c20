"""Kernel definitions and kernel classes for nonlocal operators.

A kernel of order sigma in (0, 2) assigns a nonnegative weight to each jump
offset y != 0.  The uniformly elliptic class is the sandwich

    (2 - sigma) lam / |y|^(n + sigma) <= K(y) <= (2 - sigma) Lam / |y|^(n + sigma)

Three variants are supported:

* ``fractional``: K(y) = (2 - sigma) a(y) / |y|^(n + sigma) with a direction
  multiplier lam <= a <= Lam (``a`` may be None for a == 1, a callable, or a
  :class:`MultiplierTable`),
* ``matrix``: K(y) = (2 - sigma) (y^T A y) / |y|^(n + 2 + sigma), equivalent
  to a fractional kernel with multiplier a(y) = y^T A y / |y|^2,
* ``truncated``: K = K1 + K2 >= 0 with K1 a kernel of either form above and
  K2 bounded, integrable, with L1 norm at most kappa.

Kernels are immutable value objects.
"""

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import NpdeError

_SPHERE_MEASURE = {1: 2.0, 2: 2.0 * np.pi}


class KernelError(NpdeError, ValueError):
    """Invalid kernel data or evaluation at an illegal point."""


def _as_points(y, n):
    pts = np.asarray(y, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        pts = pts.reshape(1, -1) if (n > 1 and pts.size == n) else pts.reshape(-1, 1)
    if pts.ndim != 2 or pts.shape[1] != n:
        raise KernelError(f"expected points of dimension {n}, got shape {pts.shape}")
    return pts


def _fold(pts):
    """Map each point to its canonical antipodal representative.

    The sign flip is chosen from the first nonzero coordinate, so y and -y
    fold to the bit-identical point and multiplier lookups are exactly even.
    """
    s = np.where(pts[:, 0] > 0, 1.0, np.where(pts[:, 0] < 0, -1.0, 0.0))
    for k in range(1, pts.shape[1]):
        sk = np.where(pts[:, k] > 0, 1.0, np.where(pts[:, k] < 0, -1.0, 0.0))
        s = np.where(s == 0.0, sk, s)
    s = np.where(s == 0.0, 1.0, s)
    return pts * s[:, None]


@dataclass(frozen=True)
class MultiplierTable:
    """Finite table of direction multipliers with nearest-direction lookup.

    ``directions`` is (m, n) with unit rows treated as lines (antipodal pairs
    identified); ``values`` the multiplier on each line.
    """

    directions: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.directions, dtype=float))
        v = np.asarray(self.values, dtype=float)
        if d.shape[0] != v.shape[0] or d.shape[0] == 0:
            raise KernelError("multiplier table needs one value per direction")
        norms = np.linalg.norm(d, axis=1)
        if np.any(norms <= 0):
            raise KernelError("zero direction in multiplier table")
        object.__setattr__(self, "directions", d / norms[:, None])
        object.__setattr__(self, "values", v)

    def __call__(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        # nearest line: largest |cos| against the table directions
        sim = np.abs(pts @ self.directions.T)
        return self.values[np.argmax(sim, axis=1)]


@dataclass(frozen=True)
class Kernel:
    """Immutable kernel description; build via the factory functions."""

    n: int
    sigma: float
    variant: str
    lam: float
    Lam: float
    multiplier: object = None
    matrix: object = None
    base: object = None
    l1_part: object = None
    kappa: float = 0.0
    c_n: object = None  # calibrated normalization, set by the limits module

    def with_cn(self, value):
        return replace(self, c_n=float(value))


def _check_common(n, sigma, lam, Lam):
    if n not in (1, 2):
        raise KernelError(f"dimension must be 1 or 2, got {n}")
    if not 0.0 < sigma < 2.0:
        raise KernelError(f"sigma must lie in (0, 2), got {sigma}")
    if not 0.0 < lam <= Lam:
        raise KernelError(f"need 0 < lambda <= Lambda, got {lam}, {Lam}")


def fractional_kernel(n, sigma, lam=1.0, Lam=1.0, multiplier=None):
    """K(y) = (2 - sigma) a(y) / |y|^(n + sigma), lam <= a <= Lam."""
    _check_common(n, sigma, lam, Lam)
    return Kernel(n=n, sigma=float(sigma), variant="fractional",
                  lam=float(lam), Lam=float(Lam), multiplier=multiplier)


def matrix_kernel(A, sigma, lam, Lam):
    """K(y) = (2 - sigma) (y^T A y) / |y|^(n + 2 + sigma), lam I <= A <= Lam I."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    _check_common(n, sigma, lam, Lam)
    if A.shape != (n, n) or not np.allclose(A, A.T, atol=1e-13):
        raise KernelError("matrix kernel needs a symmetric n x n matrix")
    eigs = np.linalg.eigvalsh(A)
    if eigs.min() < lam * (1 - 1e-12) or eigs.max() > Lam * (1 + 1e-12):
        raise KernelError(
            f"matrix eigenvalues {eigs} violate lam I <= A <= Lam I")
    A = A.copy()
    A.setflags(write=False)
    return Kernel(n=n, sigma=float(sigma), variant="matrix",
                  lam=float(lam), Lam=float(Lam), matrix=A)


def truncated_kernel(base, l1_part, kappa):
    """K = base + K2 with ||K2||_1 <= kappa; K must stay nonnegative.

    ``l1_part`` is a callable mapping (m, n) points to bounded values.  K2
    must be even; evaluation folds y to its canonical antipodal
    representative so K(-y) == K(y) holds bitwise.  Nonnegativity of the
    sum is sampled here and again in truncated_split.
    """
    if base.variant == "truncated":
        raise KernelError("truncated base must be fractional or matrix")
    if kappa < 0:
        raise KernelError("kappa must be nonnegative")
    kern = Kernel(n=base.n, sigma=base.sigma, variant="truncated",
                  lam=base.lam, Lam=base.Lam, base=base, l1_part=l1_part,
                  kappa=float(kappa))
    _check_nonnegative(kern, samples=512)
    return kern


def multiplier_values(K, pts):
    """Direction multiplier a(y) with K(y) = (2-sigma) a(y) / |y|^(n+sigma).

    Defined for fractional and matrix variants; evaluation folds y to the
    canonical antipodal representative so a(-y) == a(y) bitwise.
    """
    pts = _as_points(pts, K.n)
    if K.variant == "matrix":
        r2 = np.sum(pts * pts, axis=1)
        quad = np.einsum("ki,ij,kj->k", pts, K.matrix, pts)
        return quad / r2
    if K.variant != "fractional":
        raise KernelError(f"no direction multiplier for variant {K.variant}")
    if K.multiplier is None:
        return np.ones(pts.shape[0])
    return np.asarray(K.multiplier(_fold(pts)), dtype=float)


def kernel_value(K, y):
    """Evaluate the kernel at one point or an (m, n) array of points."""
    pts = _as_points(y, K.n)
    r2 = np.sum(pts * pts, axis=1)
    if np.any(r2 == 0.0):
        raise KernelError("kernel is singular at the origin")
    arr = np.asarray(y)
    scalar = arr.ndim == 0 or (arr.ndim == 1 and (K.n > 1 or arr.size == 1))
    if K.variant == "truncated":
        vals = kernel_value(K.base, pts) + np.asarray(
            K.l1_part(_fold(pts)), dtype=float)
    else:
        a = multiplier_values(K, pts)
        vals = (2.0 - K.sigma) * a * r2 ** (-0.5 * (K.n + K.sigma))
    return float(vals[0]) if scalar else vals


def _check_nonnegative(K, samples):
    rng = np.random.default_rng(421)
    radii = np.geomspace(1e-3, 1e3, samples)
    if K.n == 1:
        pts = radii.reshape(-1, 1) * np.where(
            rng.random(samples) < 0.5, -1.0, 1.0).reshape(-1, 1)
    else:
        ang = rng.uniform(0, 2 * np.pi, samples)
        pts = radii[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    vals = kernel_value(K, pts)
    if np.min(vals) < -1e-12:
        raise KernelError("truncated kernel is negative at sampled points")


# ---------------------------------------------------------------------------
# kernel classes


@dataclass(frozen=True)
class KernelClass:
    """A family of kernels: L0 sandwich, L1 smoothness, truncated, or finite."""

    tag: str
    n: int
    sigma: float
    lam: float
    Lam: float
    rho0: float = 0.0
    smoothness_c: float = 0.0
    kappa: float = 0.0
    members: tuple = ()


def l0_class(n, sigma, lam, Lam):
    _check_common(n, sigma, lam, Lam)
    return KernelClass(tag="L0", n=n, sigma=float(sigma), lam=float(lam),
                       Lam=float(Lam))


def l1_class(n, sigma, lam, Lam, rho0, smoothness_c):
    _check_common(n, sigma, lam, Lam)
    if rho0 <= 0 or smoothness_c <= 0:
        raise KernelError("L1 class needs positive rho0 and smoothness bound")
    return KernelClass(tag="L1", n=n, sigma=float(sigma), lam=float(lam),
                       Lam=float(Lam), rho0=float(rho0),
                       smoothness_c=float(smoothness_c))


def truncated_class(n, sigma, lam, Lam, kappa):
    _check_common(n, sigma, lam, Lam)
    if kappa < 0:
        raise KernelError("kappa must be nonnegative")
    return KernelClass(tag="truncated", n=n, sigma=float(sigma),
                       lam=float(lam), Lam=float(Lam), kappa=float(kappa))


def finite_class(kernels):
    kernels = tuple(kernels)
    if not kernels:
        raise KernelError("finite kernel family must be nonempty")
    n = kernels[0].n
    if any(k.n != n for k in kernels):
        raise KernelError("finite kernel family must share dimension")
    lam = min(k.lam for k in kernels)
    Lam = max(k.Lam for k in kernels)
    sig = kernels[0].sigma
    return KernelClass(tag="finite", n=n, sigma=sig, lam=lam, Lam=Lam,
                       members=kernels)


# ---------------------------------------------------------------------------
# smoothness modulus (L1 membership certificate)


def _annulus_cells(n, r_lo, r_hi, n_rad, n_ang):
    """Midpoint cells of the annulus; returns points and exact cell measures."""
    edges = np.linspace(r_lo, r_hi, n_rad + 1)
    rm = 0.5 * (edges[:-1] + edges[1:])
    if n == 1:
        dr = np.diff(edges)
        pts = np.concatenate([rm, -rm]).reshape(-1, 1)
        meas = np.concatenate([dr, dr])
        return pts, meas
    area = 0.5 * (edges[1:] ** 2 - edges[:-1] ** 2) * (2 * np.pi / n_ang)
    ang = (np.arange(n_ang) + 0.5) * (2 * np.pi / n_ang)
    R, T = np.meshgrid(rm, ang, indexing="ij")
    pts = np.stack([(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel()], axis=1)
    meas = np.broadcast_to(area[:, None], R.shape).ravel()
    return pts, meas


def smoothness_modulus(K, rho0, h, rel_tol=1e-4, max_annuli=120):
    """int_{R^n \\ B_rho0} |K(y) - K(y - h)| / |h| dy.

    Annular composite midpoint rule, annuli geometric with ratio 1.5; each
    annulus is refined until stable, and the outward sweep stops when two
    successive cumulative estimates differ by less than ``rel_tol`` relative
    (an analytic gradient-bound tail closes constant-multiplier kernels).
    Divergence under refinement raises ``KernelError("not in L1 ...")``.
    """
    h = np.asarray(h, dtype=float).reshape(-1)
    if h.shape[0] != K.n:
        raise KernelError(f"offset dimension {h.shape[0]} != kernel dimension {K.n}")
    hnorm = float(np.linalg.norm(h))
    if hnorm == 0.0:
        raise KernelError("offset h must be nonzero")
    if hnorm >= rho0 / 2:
        raise KernelError("need |h| < rho0 / 2")

    def annulus_value(r_lo, r_hi):
        # three-value stability guards against coincidental agreement when
        # K jumps inside the annulus (midpoint error is not monotone there)
        n_rad, n_ang = 8, 128
        vals = []
        for _ in range(12):
            pts, meas = _annulus_cells(K.n, r_lo, r_hi, n_rad, n_ang)
            diff = np.abs(kernel_value(K, pts) - kernel_value(K, pts - h))
            vals.append(float(np.sum(diff * meas)) / hnorm)
            if len(vals) >= 3:
                scale = max(abs(vals[-1]), 1e-300)
                if (abs(vals[-1] - vals[-2]) <= 1e-4 * scale
                        and abs(vals[-2] - vals[-3]) <= 1e-4 * scale):
                    return vals[-1]
            n_rad *= 2
        return vals[-1]

    smooth_tail = K.variant in ("matrix",) or (
        K.variant == "fractional" and K.multiplier is None)

    total = 0.0
    r = float(rho0)
    contribs = []
    grew = 0
    for k in range(max_annuli):
        c = annulus_value(r, 1.5 * r)
        contribs.append(c)
        total += c
        r *= 1.5
        if k >= 4 and contribs[-1] > contribs[-2] * (1 - 1e-3) > 0:
            grew += 1
            if grew >= 3:
                raise KernelError("not in L1: smoothness modulus diverges")
        else:
            grew = 0
        if smooth_tail:
            # |grad K| <= (n+sigma)(2-sigma) Lam |y|^(-1-n-sigma) and
            # r^(n-1) <= (2(r-|h|))^(n-1) on the tail give a closed bound
            ns = K.n + K.sigma
            tail = (_SPHERE_MEASURE[K.n] * ns * (2 - K.sigma) * K.Lam
                    * 2.0 ** (K.n - 1) * (r - hnorm) ** (-1 - K.sigma)
                    / (1 + K.sigma))
            if tail <= rel_tol * max(total, 1e-300):
                return total + tail
        else:
            if (k >= 6 and total > 0
                    and max(contribs[-3:]) <= rel_tol * total):
                return total
    raise KernelError("not in L1: smoothness modulus did not converge")


def truncated_split(K):
    """Return (K1, K2, kappa_numeric) for a truncated kernel.

    kappa_numeric integrates |K2| over the window 1e-12 <= |y| <= 1e9 by the
    annular midpoint scheme (geometric annuli, ratio 1.5); once mass has been
    seen, the sweep stops after six consecutive negligible annuli.  It must
    not exceed the stored kappa by more than a 1e-6 relative margin, and
    K1 + K2 must be nonnegative at sampled points.
    """
    if K.variant != "truncated":
        raise KernelError("truncated_split needs a truncated kernel")
    _check_nonnegative(K, samples=10000)

    def annulus_value(r_lo, r_hi):
        # three-value stability guards against coincidental agreement when
        # K2 jumps inside the annulus (midpoint error is not monotone there)
        n_rad, n_ang = 8, 128
        vals = []
        for _ in range(14):
            pts, meas = _annulus_cells(K.n, r_lo, r_hi, n_rad, n_ang)
            vals.append(float(np.sum(
                np.abs(np.asarray(K.l1_part(_fold(pts)))) * meas)))
            if len(vals) >= 3:
                scale = max(abs(vals[-1]), 1e-300)
                if (abs(vals[-1] - vals[-2]) <= 1e-5 * scale
                        and abs(vals[-2] - vals[-3]) <= 1e-5 * scale):
                    return vals[-1]
            n_rad *= 2
        return vals[-1]

    total = 0.0
    # from the inside out: [0, 1e-3], then geometric annuli
    total += annulus_value(1e-12, 1e-3)
    r, quiet = 1e-3, 0
    while r < 1e9:
        c = annulus_value(r, 1.5 * r)
        total += c
        r *= 1.5
        # only count quiet annuli once mass has been seen, so support far
        # from the origin is not skipped
        quiet = quiet + 1 if (total > 0 and c <= 1e-10 * total) else 0
        if quiet >= 6:
            break
    if total > K.kappa * (1 + 1e-6):
        raise KernelError(
            f"integrated |K2| = {total} exceeds stored kappa = {K.kappa}")
    return K.base, K.l1_part, total


# ---------------------------------------------------------------------------
# config parsing


def kernel_from_config(section, n):
    """Build a kernel from a config mapping like
    ``kernel = { variant = "fractional", sigma = 1.5, lambda = 1.0, Lambda = 2.0 }``.
    """
    if not isinstance(section, dict):
        raise KernelError("kernel config must be a table")
    try:
        variant = section["variant"]
        sigma = float(section["sigma"])
        lam = float(section["lambda"])
        Lam = float(section["Lambda"])
    except KeyError as exc:
        raise KernelError(f"kernel config missing key {exc}") from exc
    if variant == "fractional":
        return fractional_kernel(n, sigma, lam, Lam)
    if variant == "matrix":
        if "A" not in section:
            raise KernelError("matrix kernel config needs key A")
        return matrix_kernel(section["A"], sigma, lam, Lam)
    raise KernelError(f"unknown kernel variant {variant!r} in config")
