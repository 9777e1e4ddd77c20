"""Empirical regularity estimators for grid functions.

Measures the observable consequences of uniform ellipticity: Holder
exponents from oscillation decay over shrinking balls, Harnack ratios,
tail exponents of level-set measure, and incremental quotient fields for
the bootstrap from Holder to derivative estimates. Exponents and
constants are always fitted from node data and returned with their fit
quality, never asserted.

The fitting routines refuse inputs that have not been certified: a
Certificate from certify_solution records a passed sweep check of the
extremal inequalities M+ u >= -C0 and M- u <= C0 at interior nodes, so
the fits measure what the inequalities deliver rather than decorating
arbitrary arrays. Closed-form probes that are not solutions can opt out
with allow_uncertified=True.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from .exceptions import NpdeError
from .grid import GridFunction, _Derived
from .kernels import l0_class
from .operators import apply, apply_sweep, extremal_operator

__all__ = [
    "Certificate",
    "RegularityError",
    "RegularityReport",
    "RegularityRow",
    "certify_solution",
    "harnack_measure",
    "holder_fit",
    "incremental_quotient_field",
    "regularity_row",
    "tail_fit",
]

# fitted Holder exponents are capped here: beyond Lipschitz the
# oscillation ladder measures smoothness the seminorm cannot express
ALPHA_CAP = 1.0

# node values above this negative magnitude count as nonnegative
NEG_TOL = 1e-10

# least number of resolvable ball scales for an oscillation fit
MIN_SCALES = 3

# certification slack factor: discrete solutions satisfy the extremal
# bounds only up to solver tolerance and quadrature error
CERT_SLACK = 1e-6

# levels tried below the median anchor before walking the ladder up
LADDER_DOWN = 3


class RegularityError(NpdeError, ValueError):
    """Raised for unusable estimator inputs or failed certification."""


def _fingerprint(u: GridFunction) -> str:
    h = hashlib.sha256()
    h.update(np.int64(u.spec.n).tobytes())
    h.update(np.float64(u.spec.h).tobytes())
    h.update(np.float64(u.spec.R_box).tobytes())
    h.update(np.ascontiguousarray(u.values).tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class Certificate:
    """Record of a passed extremal-inequality check on one grid function.

    side names the hypothesis that was checked: "sub" for M+ u >= -c0,
    "super" for M- u <= c0, "both" for the pair. plus_min and minus_max
    are the measured extrema over the checked nodes; an unchecked side
    keeps the neutral value (+inf for plus_min, -inf for minus_max).
    fingerprint ties the certificate to the exact value array it was
    issued for.
    """

    c0: float
    sigma: float
    lam: float
    Lam: float
    radius: float
    side: str
    plus_min: float
    minus_max: float
    fingerprint: str

    def matches(self, u: GridFunction) -> bool:
        return self.fingerprint == _fingerprint(u)

    def covers(self, need: str) -> bool:
        return self.side == "both" or self.side == need


def _ball_values(op, u, ball, quad):
    """Operator values on the ball nodes: sweep when it resolves them,
    per-node application otherwise (mirrors the solver's fallback for
    closures the sweep cannot integrate)."""
    try:
        vals, ok = apply_sweep(op, u, quad)
        if np.all(ok[ball]):
            return vals
    except NpdeError:
        pass
    vals = np.full(u.spec.shape, np.nan)
    nodes = u.spec.nodes().reshape(u.spec.shape + (u.spec.n,))
    for ij in np.argwhere(ball):
        t = tuple(ij)
        vals[t] = apply(op, u, nodes[t], quad)
    return vals


def certify_solution(u, c0, sigma, lam=1.0, Lam=1.0, quad=None,
                     radius=1.0, side="both") -> Certificate:
    """Check the extremal inequalities at every node with |x| < radius.

    side selects the hypothesis: "sub" checks M+ u >= -c0, "super"
    checks M- u <= c0, "both" (default) checks the pair. The extremal
    operators over the uniformly elliptic class are evaluated node by
    node and the inequalities are enforced with slack
    CERT_SLACK * max(1, c0, sup|u|). Returns a Certificate carrying the
    measured extrema; raises RegularityError on violation.
    """
    if not isinstance(u, GridFunction):
        raise RegularityError("certify_solution expects a GridFunction")
    if not (0.0 < sigma < 2.0):
        raise RegularityError(f"sigma must lie in (0, 2), got {sigma}")
    c0 = float(c0)
    if not (np.isfinite(c0) and c0 >= 0.0):
        raise RegularityError(f"c0 must be finite and nonnegative, got {c0}")
    radius = float(radius)
    if not (0.0 < radius <= u.spec.extent):
        raise RegularityError("certification radius must lie inside the box")
    if side not in ("both", "sub", "super"):
        raise RegularityError(
            f"side must be 'both', 'sub' or 'super', got {side!r}")
    kc = l0_class(u.spec.n, sigma, lam, Lam)
    ball = u.spec.node_radii() < radius - 1e-9
    if not np.any(ball):
        raise RegularityError("no nodes inside the certification radius")
    slack = CERT_SLACK * max(1.0, c0, float(np.max(np.abs(u.values))))
    plus_min, minus_max = np.inf, -np.inf
    if side in ("both", "sub"):
        vals = _ball_values(extremal_operator(kc, "plus"), u, ball, quad)
        plus_min = float(np.min(vals[ball]))
        if plus_min < -c0 - slack:
            raise RegularityError(
                f"certification failed: need min M+ u >= {-c0:.6g}, "
                f"measured {plus_min:.6g}")
    if side in ("both", "super"):
        vals = _ball_values(extremal_operator(kc, "minus"), u, ball, quad)
        minus_max = float(np.max(vals[ball]))
        if minus_max > c0 + slack:
            raise RegularityError(
                f"certification failed: need max M- u <= {c0:.6g}, "
                f"measured {minus_max:.6g}")
    return Certificate(c0=c0, sigma=float(sigma), lam=float(lam),
                       Lam=float(Lam), radius=radius, side=side,
                       plus_min=plus_min, minus_max=minus_max,
                       fingerprint=_fingerprint(u))


def _gate(u, certificate, allow_uncertified, caller, need):
    # estimators refuse uncertified inputs unless explicitly waived
    if not isinstance(u, GridFunction):
        raise RegularityError(f"{caller} expects a GridFunction")
    if allow_uncertified:
        return
    if certificate is None:
        raise RegularityError(
            f"{caller} refuses uncertified input: pass certificate= from "
            "certify_solution, or allow_uncertified=True for a probe that "
            "is not a solution")
    if not isinstance(certificate, Certificate):
        raise RegularityError("certificate must come from certify_solution")
    if not certificate.covers(need):
        raise RegularityError(
            f"certificate side {certificate.side!r} does not cover the "
            f"{need!r} hypothesis {caller} relies on")
    if not certificate.matches(u):
        raise RegularityError(
            "certificate fingerprint does not match this grid function")


def _line_fit(x, y):
    """Least-squares line y ~ slope*x + intercept with r^2.

    Exactly flat data has no variance to explain; by convention that fit
    is perfect (r2 = 1).
    """
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    if ss_tot <= 1e-30:
        r2 = 1.0
    else:
        r2 = max(0.0, 1.0 - ss_res / ss_tot)
    return float(coef[0]), float(coef[1]), min(r2, 1.0)


def holder_fit(u, radius, *, certificate=None, allow_uncertified=False):
    """Fit a Holder exponent from oscillation decay over shrinking balls.

    Measures osc_k over the closed node ball B(0, radius * 4^-k) for
    every scale the grid resolves (radius * 4^-k >= 2h) and fits
    log4 osc_k against k. Returns (alpha, seminorm, r2) with
    alpha = min(-slope, ALPHA_CAP), seminorm the largest quotient
    |u(x) - u(y)| / |x - y|^alpha over node pairs in B(0, radius), and
    r2 the fit quality. A function constant at every resolvable scale
    returns the degenerate (ALPHA_CAP, 0.0, 1.0).
    """
    _gate(u, certificate, allow_uncertified, "holder_fit", "both")
    spec = u.spec
    radius = float(radius)
    if not (0.0 < radius <= spec.extent):
        raise RegularityError("fit radius must lie inside the box")
    r = spec.node_radii()
    oscs = []
    k = 0
    while radius * 4.0 ** -k >= 2.0 * spec.h * (1.0 - 1e-12):
        vals = u.values[r <= radius * 4.0 ** -k + 1e-12]
        oscs.append(float(np.max(vals) - np.min(vals)))
        k += 1
    if k < MIN_SCALES:
        raise RegularityError(
            f"only {k} resolvable scales between radius {radius:.6g} and "
            f"2h = {2 * spec.h:.6g}; need {MIN_SCALES}")
    oscs = np.asarray(oscs)
    ks = np.arange(len(oscs), dtype=float)
    pos = oscs > 0.0
    if not np.any(pos):
        return ALPHA_CAP, 0.0, 1.0
    if np.count_nonzero(pos) < MIN_SCALES:
        raise RegularityError(
            "oscillation vanishes at all but "
            f"{np.count_nonzero(pos)} scales; no stable fit")
    slope, _, r2 = _line_fit(ks[pos], np.log(oscs[pos]) / np.log(4.0))
    alpha = min(-slope, ALPHA_CAP)

    sel = (r <= radius + 1e-12).ravel()
    pts = spec.nodes()[sel]
    vals = u.values.ravel()[sel]
    best = 0.0
    chunk = max(1, int(2.0e6) // max(pts.shape[0], 1))
    for a in range(0, pts.shape[0], chunk):
        d = pts[a:a + chunk, None, :] - pts[None, :, :]
        dist = np.sqrt(np.sum(d * d, axis=2))
        dv = np.abs(vals[a:a + chunk, None] - vals[None, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(dist > 0.0, dv / dist ** alpha, 0.0)
        best = max(best, float(np.max(q)))
    return alpha, best, r2


def harnack_measure(u, c0, *, certificate=None, allow_uncertified=False):
    """Measured Harnack ratio sup over B_{1/2} nodes of u / (u(0) + c0).

    Requires u >= -NEG_TOL at every node and a positive denominator.
    """
    _gate(u, certificate, allow_uncertified, "harnack_measure", "both")
    c0 = float(c0)
    if not (np.isfinite(c0) and c0 >= 0.0):
        raise RegularityError(f"c0 must be finite and nonnegative, got {c0}")
    if float(np.min(u.values)) < -NEG_TOL:
        raise RegularityError(
            "harnack_measure needs a nonnegative function; min node value "
            f"is {float(np.min(u.values)):.6g}")
    denom = u.value_at(np.zeros(u.spec.n)) + c0
    if denom <= 0.0:
        raise RegularityError("u(0) + c0 must be positive")
    sel = u.spec.node_radii() <= 0.5 + 1e-12
    return float(np.max(u.values[sel])) / denom


def tail_fit(u, *, certificate=None, allow_uncertified=False):
    """Fit the tail exponent of the level-set measure inside B_1.

    Walks the geometric level ladder t_j = 2^j * anchor, where the anchor
    is the median node value on B_1 (median of the positive values when
    the plain median is not positive), measures mu_j = h^n * #{u > t_j}
    over B_1 nodes for each nontrivial level, and fits log mu against
    log t. Returns (eps, C, r2) with eps = -slope and C = e^intercept.
    A ladder with a single nontrivial level, or one whose measures are
    all equal, fits flat: the degenerate convention is eps = 0 with
    r2 = 1. Raises when every level is empty or full.
    """
    _gate(u, certificate, allow_uncertified, "tail_fit", "super")
    if float(np.min(u.values)) < -NEG_TOL:
        raise RegularityError(
            "tail_fit needs a nonnegative function; min node value is "
            f"{float(np.min(u.values)):.6g}")
    spec = u.spec
    vals = u.values[spec.node_radii() <= 1.0 + 1e-12]
    total = vals.size
    anchor = float(np.median(vals))
    if anchor <= 0.0:
        pos = vals[vals > 0.0]
        if pos.size == 0:
            raise RegularityError(
                "every level set above a positive threshold is empty")
        anchor = float(np.median(pos))
    ts, mus = [], []
    cell = spec.h ** spec.n
    jmax = int(np.ceil(np.log2(max(float(np.max(vals)) / anchor, 1.0)))) + 1
    for j in range(-LADDER_DOWN, jmax + 1):
        t = anchor * 2.0 ** j
        count = int(np.count_nonzero(vals > t))
        if count == 0:
            break
        if count < total:
            ts.append(t)
            mus.append(cell * count)
    if not ts:
        raise RegularityError(
            "every ladder level is empty or full; no nontrivial level sets")
    if len(ts) == 1:
        return 0.0, mus[0], 1.0
    slope, intercept, r2 = _line_fit(np.log(np.asarray(ts)),
                                     np.log(np.asarray(mus)))
    return -slope, float(np.exp(intercept)), r2


def incremental_quotient_field(u, h_step, beta) -> GridFunction:
    """Incremental quotient w(x) = (u(x + h_step) - u(x)) / |h_step|^beta.

    h_step must be a node offset (integer multiples of h) with
    |h_step| >= h, and beta must lie in (0, 1]. Node values come from
    index shifts padded with closure values; the exterior closure of w is
    the same quotient of u's total evaluation, so w stays defined on all
    of R^n. The derived closure cannot be serialized and carries no
    power-tail data, so apply operators to w per node rather than
    sweeping.
    """
    if not isinstance(u, GridFunction):
        raise RegularityError("incremental_quotient_field expects a "
                              "GridFunction")
    spec = u.spec
    step = np.asarray(h_step, dtype=float).reshape(-1)
    if step.size != spec.n:
        raise RegularityError(f"h_step must have {spec.n} components")
    k = np.rint(step / spec.h).astype(int)
    if not np.all(np.abs(k * spec.h - step) <= 1e-9 * spec.h):
        raise RegularityError(
            "h_step must be a node offset: integer multiples of "
            f"h = {spec.h:.6g}")
    s = float(np.sqrt(np.sum(step * step)))
    if s < spec.h * (1.0 - 1e-12):
        raise RegularityError(
            f"|h_step| = {s:.6g} is below the grid spacing {spec.h:.6g}")
    beta = float(beta)
    if not (0.0 < beta <= 1.0):
        raise RegularityError(f"beta must lie in (0, 1], got {beta}")
    scale = s ** beta
    pad = int(np.max(np.abs(k)))
    ext = u.extended(pad)
    P = spec.npts
    if spec.n == 1:
        shifted = ext[pad + k[0]:pad + k[0] + P]
    else:
        shifted = ext[pad + k[0]:pad + k[0] + P,
                      pad + k[1]:pad + k[1] + P]
    wvals = (shifted - u.values) / scale
    base = u.closure

    def qfunc(pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return (u.eval(pts + step) - base.values(pts)) / scale

    def qpair(x, dirs):
        x = np.asarray(x, dtype=float)
        dirs = np.asarray(dirs, dtype=float)
        return (base.pair_limit(x + step, dirs)
                - base.pair_limit(x, dirs)) / scale

    # conservative sup bound: a shifted exterior point can land back
    # inside the box, where |u| is bounded by its node sup
    inner = max(float(np.max(np.abs(u.values))),
                float(base.bound(max(spec.extent - s, 0.0))))
    bval = (inner + float(base.bound(spec.extent))) / scale
    return GridFunction(spec, wvals, _Derived(qfunc, bval, qpair),
                        check=False)


@dataclass(frozen=True)
class RegularityRow:
    """Measured regularity observables of one function at one order."""

    sigma: float
    holder_alpha: float
    holder_seminorm: float
    holder_r2: float
    harnack_c: float
    tail_eps: float
    tail_c: float
    tail_r2: float
    c1a_alpha: float
    c1a_r2: float

    _FIELDS = ("sigma", "holder_alpha", "holder_seminorm", "holder_r2",
               "harnack_c", "tail_eps", "tail_c", "tail_r2",
               "c1a_alpha", "c1a_r2")

    def __post_init__(self):
        for name in self._FIELDS:
            v = float(getattr(self, name))
            object.__setattr__(self, name, v)
            if not np.isfinite(v):
                raise RegularityError(f"{name} must be finite, got {v}")
        for name in ("holder_r2", "tail_r2", "c1a_r2"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise RegularityError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class RegularityReport:
    """Rows of regularity observables over a family of orders."""

    rows: tuple

    def __post_init__(self):
        rows = tuple(self.rows)
        if not rows:
            raise RegularityError("a report needs at least one row")
        for row in rows:
            if not isinstance(row, RegularityRow):
                raise RegularityError("report rows must be RegularityRow")
        object.__setattr__(self, "rows", rows)

    def column(self, name) -> np.ndarray:
        if name not in RegularityRow._FIELDS:
            raise RegularityError(f"unknown report column {name!r}")
        return np.asarray([getattr(row, name) for row in self.rows])


def regularity_row(u, c0, sigma, lam=1.0, Lam=1.0, quad=None,
                   fit_radius=0.5, quotient_step=None) -> RegularityRow:
    """Certify u at order sigma and measure every report observable.

    Certification sweeps B_1; fits run over B_fit_radius. The quotient
    field uses the fitted Holder exponent as its beta (the bootstrap
    exponent) and defaults to a step of 2h along the first axis. The
    quotient field is fitted without its own certificate: its hypothesis
    is the translation-invariance consequence of u's certificate.
    """
    cert = certify_solution(u, c0, sigma, lam=lam, Lam=Lam, quad=quad)
    alpha, seminorm, holder_r2 = holder_fit(u, fit_radius, certificate=cert)
    harnack_c = harnack_measure(u, c0, certificate=cert)
    tail_eps, tail_c, tail_r2 = tail_fit(u, certificate=cert)
    if alpha <= 0.0:
        raise RegularityError(
            f"fitted alpha = {alpha:.6g} is not positive; cannot form a "
            "quotient exponent")
    if quotient_step is None:
        quotient_step = np.zeros(u.spec.n)
        quotient_step[0] = 2.0 * u.spec.h
    w = incremental_quotient_field(u, quotient_step, min(alpha, 1.0))
    c1a_alpha, _, c1a_r2 = holder_fit(w, fit_radius, allow_uncertified=True)
    return RegularityRow(sigma=sigma, holder_alpha=alpha,
                         holder_seminorm=seminorm, holder_r2=holder_r2,
                         harnack_c=harnack_c, tail_eps=tail_eps,
                         tail_c=tail_c, tail_r2=tail_r2,
                         c1a_alpha=c1a_alpha, c1a_r2=c1a_r2)
