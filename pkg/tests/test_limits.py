import numpy as np
import pytest

from npde.grid import (
    GridFunction,
    GridSpec,
    _Derived,
    constant_closure,
    sample_function,
    zero_closure,
)
from npde.kernels import fractional_kernel, l0_class
from npde.operators import apply, extremal_operator, linear_operator
from npde.limits import (
    LimitError,
    LimitReport,
    calibrate_cn,
    sigma_limit_error,
)

rng = np.random.default_rng(20240819)

# Ladder errors and calibrated constants are frozen at full precision from
# the first runs after the closed-form cross-checks below agreed; they are
# pure quadrature, so exact reproducibility is part of the contract.

_cn = {}


def cn(n):
    if n not in _cn:
        _cn[n] = calibrate_cn(n)
    return _cn[n]


def cap(r):
    # quintic descent from 1 at r = 1/2 to 0 at r = 1, C^2 across both ends
    t = np.clip((np.asarray(r, dtype=float) - 0.5) / 0.5, 0.0, 1.0)
    return 1.0 - t ** 3 * (10.0 - 15.0 * t + 6.0 * t * t)


def capped_quadratic_rate(n, sigma):
    # closed radial form of the kernel operator on x_1^2 * cap(|x|) at 0:
    # second differences double the function, the angular integral of
    # y_1^2 gives 2 (n = 1) or pi (n = 2), and the radial integral splits
    # into an exact plateau part and a smooth remainder
    gl_x, gl_w = np.polynomial.legendre.leggauss(200)
    r = 0.75 + 0.25 * gl_x
    tail = 0.25 * np.sum(gl_w * r ** (1.0 - sigma) * cap(r))
    plateau_plus_tail = 0.5 ** (2.0 - sigma) + (2.0 - sigma) * tail
    angular = 4.0 if n == 1 else 2.0 * np.pi
    return angular * plateau_plus_tail


def gaussian_probe(spec):
    def fn(pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.exp(-np.sum(pts * pts, axis=1))

    nodes = spec.nodes().reshape(-1, spec.n)
    vals = fn(nodes).reshape(spec.shape)
    u = GridFunction(spec, vals, _Derived(fn, float(np.exp(-spec.extent ** 2))),
                     check=False)

    def hessian(x):
        x = np.asarray(x, dtype=float)
        return ((4.0 * np.outer(x, x) - 2.0 * np.eye(x.size))
                * np.exp(-float(np.sum(x * x))))

    return u, hessian


# ---------------------------------------------------------------------------
# calibration


def test_calibrated_c1_matches_radial_closed_form():
    c = cn(1)
    indep = 2.0 / capped_quadratic_rate(1, 2.0 - 1e-3)
    assert indep == pytest.approx(0.5001479031464832, rel=1e-12)
    assert abs(c - indep) <= 1e-3
    assert c == pytest.approx(0.5001479008114611, rel=1e-12)
    # the exact limit constant in one dimension is 1/2
    assert abs(c - 0.5) <= 2e-4


def test_calibrated_c2_matches_radial_closed_form():
    c = cn(2)
    indep = 2.0 / capped_quadratic_rate(2, 2.0 - 1e-3)
    assert indep == pytest.approx(0.31840404425123725, rel=1e-12)
    assert abs(c - indep) <= 1e-3
    assert c == pytest.approx(0.3183875294697183, rel=1e-12)
    # the exact limit constant in two dimensions is 1/pi
    assert abs(c - 1.0 / np.pi) <= 1e-4


def test_calibration_stable_on_coarse_grid():
    c = calibrate_cn(1, grid=GridSpec(1, 1 / 4, 4.0))
    assert c == pytest.approx(0.5001455145011374, rel=1e-12)
    assert abs(c - cn(1)) <= 1e-5


def test_calibration_rejects_bad_inputs():
    with pytest.raises(LimitError, match="positive integer"):
        calibrate_cn(0)
    with pytest.raises(LimitError, match="no default grid for n = 3"):
        calibrate_cn(3)
    with pytest.raises(LimitError, match="dimension 2, expected 1"):
        calibrate_cn(1, grid=GridSpec(2, 1 / 64, 6.0))


# ---------------------------------------------------------------------------
# ladder reports


def test_isotropic_gaussian_ladder():
    rep = sigma_limit_error("gaussian", np.eye(1), [1.5, 1.9, 1.99, 1.999])
    frozen = (0.4177911434311703, 0.055185317988087235,
              0.005381854446912415, 0.0010000611292024786)
    assert rep.sigmas == (1.5, 1.9, 1.99, 1.999)
    assert rep.errors == pytest.approx(frozen, rel=1e-12)
    assert rep.c_n == pytest.approx(cn(1), rel=1e-12)
    assert all(b < a for a, b in zip(rep.errors, rep.errors[1:]))
    assert rep.errors[-1] <= 1e-2
    assert rep.decreasing and rep.passed


def test_anisotropic_plane_ladder():
    # A = diag(1, 2): the capped quadratic feels only (A A^T)[0, 0] = 1,
    # so the target stays 2 while the kernel is genuinely anisotropic
    rep = sigma_limit_error("cutquad", np.diag([1.0, 2.0]), [1.5, 1.9, 1.99])
    frozen = (1.1189653404769313, 0.28047338078531325, 0.029275953824003942)
    assert rep.errors == pytest.approx(frozen, rel=1e-12)
    assert rep.decreasing
    # honest flag: the ladder stops at 1.99 and the gap is still 3e-2
    assert not rep.passed


def test_scaled_matrix_ladder():
    # A = [[2]]: a = 4, target 4 u'' at each probe point
    rep = sigma_limit_error("gaussian", np.array([[2.0]]),
                            [1.5, 1.9, 1.99, 1.999])
    frozen = (1.1614539479481714, 0.3488242917158537,
              0.03588597912906355, 0.0015457833570344803)
    assert rep.errors == pytest.approx(frozen, rel=1e-12)
    assert rep.passed


def test_nondiagonal_matrix_ladder():
    A = np.array([[1.0, 0.5], [0.5, 1.25]])
    rep = sigma_limit_error("cutquad", A, [1.9, 1.99])
    frozen = (0.20910199634684012, 0.019231341787702583)
    assert rep.errors == pytest.approx(frozen, rel=1e-12)
    assert rep.decreasing


def test_constant_probe_is_exactly_annihilated():
    s = GridSpec(1, 1 / 64, 4.0)
    u = sample_function(s, lambda p: np.full(len(p), 0.8),
                        constant_closure(0.8))
    rep = sigma_limit_error((u, lambda x: np.zeros((1, 1))), np.eye(1),
                            [1.5, 1.9, 1.999], c_n=0.5)
    assert rep.errors == (0.0, 0.0, 0.0)
    assert rep.decreasing and rep.passed


def test_affine_probe_vanishes_for_every_sigma():
    # second differences of affine data cancel pointwise, so both the
    # operator and the hessian target vanish; the closure must continue
    # the affine formula for the cancellation to survive the tail
    s = GridSpec(1, 1 / 256, 4.0)
    a, b = 0.3, 0.7

    def aff(pts):
        return a + b * np.atleast_2d(np.asarray(pts, dtype=float))[:, 0]

    def aff_pair(x, dirs):
        x0 = float(np.asarray(x, dtype=float).ravel()[0])
        return np.full(len(np.atleast_2d(dirs)), 2.0 * (a + b * x0))

    vals = aff(s.nodes().reshape(-1, 1)).reshape(s.shape)
    u = GridFunction(s, vals, _Derived(aff, a + b * 16.0, aff_pair),
                     check=False)
    rep = sigma_limit_error((u, lambda x: np.zeros((1, 1))), np.eye(1),
                            [1.5, 1.9, 1.999], c_n=0.5)
    assert all(e <= 1e-12 for e in rep.errors)
    assert rep.passed


def test_tag_and_pair_routes_agree():
    u, hessian = gaussian_probe(GridSpec(1, 1 / 256, 4.0))
    tag = sigma_limit_error("gaussian", np.eye(1), [1.9], c_n=cn(1))
    pair = sigma_limit_error((u, hessian), np.eye(1), [1.9], c_n=cn(1))
    assert tag.errors == pair.errors


def test_probe_points_can_be_a_flat_list():
    rep = sigma_limit_error("gaussian", np.eye(1), [1.9],
                            points=[0.0, -0.25], c_n=cn(1))
    assert rep.errors[0] == pytest.approx(0.05296378608617358, rel=1e-12)


# ---------------------------------------------------------------------------
# exact structure


def test_doubling_cn_doubles_the_operator_exactly():
    u, _ = gaussian_probe(GridSpec(1, 1 / 256, 4.0))
    c = cn(1)
    x = np.array([0.375])
    one = fractional_kernel(1, 1.7, multiplier=lambda p: np.full(len(p), c))
    two = fractional_kernel(1, 1.7, lam=c, Lam=4.0 * c,
                            multiplier=lambda p: np.full(len(p), 2.0 * c))
    v1 = apply(linear_operator(one), u, x)
    v2 = apply(linear_operator(two), u, x)
    assert v2 == 2.0 * v1


def test_doubling_the_probe_doubles_the_gap_exactly():
    s = GridSpec(1, 1 / 256, 4.0)
    u, hessian = gaussian_probe(s)
    doubled = GridFunction(
        s, 2.0 * u.values,
        _Derived(lambda p: 2.0 * np.exp(-np.sum(np.atleast_2d(p) ** 2, axis=1)),
                 2.0 * float(np.exp(-16.0))), check=False)
    base = sigma_limit_error((u, hessian), np.eye(1), [1.5, 1.9], c_n=cn(1))
    two = sigma_limit_error((doubled, lambda x: 2.0 * hessian(x)), np.eye(1),
                            [1.5, 1.9], c_n=cn(1))
    assert all(2.0 * b == t for b, t in zip(base.errors, two.errors))


def test_extremal_operators_recover_pucci_limits():
    # definite-sign probes at order 2 - 1e-3 with lam = 1, Lam = 2:
    # the capped quadratic has hessian diag(2, 0, ...) and positive second
    # differences, the gaussian has hessian -2 I and negative ones
    for n, spec in ((1, GridSpec(1, 1 / 256, 4.0)),
                    (2, GridSpec(2, 1 / 64, 6.0))):
        c = cn(n)
        x = np.zeros(n)
        uq = sample_function(
            spec,
            lambda p: p[:, 0] ** 2 * cap(np.linalg.norm(p, axis=1)),
            zero_closure())
        ug, _ = gaussian_probe(spec)
        plus = extremal_operator(l0_class(n, 2.0 - 1e-3, 1.0, 2.0), "plus")
        minus = extremal_operator(l0_class(n, 2.0 - 1e-3, 1.0, 2.0), "minus")
        # positive case: Lam * 2 and lam * 2, exact by lattice symmetry
        assert c * apply(plus, uq, x) == pytest.approx(4.0, abs=1e-12)
        assert c * apply(minus, uq, x) == pytest.approx(2.0, abs=1e-12)
        # negative case: lam * (-2 n) and Lam * (-2 n), up to the order gap
        mp = c * apply(plus, ug, x)
        mm = c * apply(minus, ug, x)
        assert abs(mp - (-2.0 * n)) <= 4e-3
        assert abs(mm - (-4.0 * n)) <= 8e-3
        if n == 1:
            assert mp == pytest.approx(-2.001000061129202, rel=1e-12)
            assert mm == pytest.approx(-4.002000122258404, rel=1e-12)
        else:
            assert mp == pytest.approx(-4.001543584617952, rel=1e-12)
            assert mm == pytest.approx(-8.003087169235904, rel=1e-12)


# ---------------------------------------------------------------------------
# validation


def test_matrix_validation():
    with pytest.raises(LimitError, match="square matrix"):
        sigma_limit_error("gaussian", np.ones((2, 3)), [1.9])
    with pytest.raises(LimitError, match="must be symmetric"):
        sigma_limit_error("gaussian", np.array([[1.0, 0.5], [0.0, 1.0]]),
                          [1.9])
    with pytest.raises(LimitError, match="positive definite"):
        sigma_limit_error("gaussian", np.array([[1.0, 2.0], [2.0, 1.0]]),
                          [1.9])


def test_probe_validation():
    with pytest.raises(LimitError, match="unknown probe 'bump'"):
        sigma_limit_error("bump", np.eye(1), [1.9])
    with pytest.raises(LimitError, match="grid function, hessian"):
        sigma_limit_error(3.5, np.eye(1), [1.9])
    s = GridSpec(1, 1 / 64, 4.0)
    u = sample_function(s, lambda p: np.zeros(len(p)),
                        constant_closure(0.0))
    with pytest.raises(LimitError, match="grid function, hessian"):
        sigma_limit_error((u, 5.0), np.eye(1), [1.9])
    with pytest.raises(LimitError, match="fixes its own"):
        sigma_limit_error((u, lambda x: np.zeros((1, 1))), np.eye(1), [1.9],
                          grid=s)
    with pytest.raises(LimitError, match="probe lives in dimension 1"):
        sigma_limit_error((u, lambda x: np.zeros((1, 1))), np.eye(2), [1.9])
    with pytest.raises(LimitError, match="grid has dimension 1"):
        sigma_limit_error("gaussian", np.eye(2), [1.9], grid=s)


def test_ladder_and_point_validation():
    with pytest.raises(LimitError, match="nonempty"):
        sigma_limit_error("gaussian", np.eye(1), [])
    with pytest.raises(LimitError, match=r"lie in \(0, 2\)"):
        sigma_limit_error("gaussian", np.eye(1), [1.5, 2.0])
    with pytest.raises(LimitError, match="increase strictly"):
        sigma_limit_error("gaussian", np.eye(1), [1.9, 1.5])
    with pytest.raises(LimitError, match="2 components"):
        sigma_limit_error("gaussian", np.eye(2), [1.9], points=[[0.0]])
    with pytest.raises(LimitError, match="c_n must be positive"):
        sigma_limit_error("gaussian", np.eye(1), [1.9], c_n=-1.0)
    with pytest.raises(LimitError, match="plateau"):
        sigma_limit_error("cutquad", np.eye(1), [1.9], points=[[0.75]],
                          c_n=0.5)


def test_report_validation():
    with pytest.raises(LimitError, match="at least one sigma"):
        LimitReport((), (), 0.5, 1e-2, True, True)
    with pytest.raises(LimitError, match="2 sigmas but 1 errors"):
        LimitReport((1.5, 1.9), (0.1,), 0.5, 1e-2, True, True)
    with pytest.raises(LimitError, match=r"lie in \(0, 2\)"):
        LimitReport((2.5,), (0.1,), 0.5, 1e-2, True, True)
    with pytest.raises(LimitError, match="increase strictly"):
        LimitReport((1.9, 1.9), (0.1, 0.1), 0.5, 1e-2, True, True)
    with pytest.raises(LimitError, match="finite and nonnegative"):
        LimitReport((1.5,), (-0.1,), 0.5, 1e-2, True, True)
    with pytest.raises(LimitError, match="c_n must be positive"):
        LimitReport((1.5,), (0.1,), 0.0, 1e-2, True, True)
    with pytest.raises(LimitError, match="tol must be positive"):
        LimitReport((1.5,), (0.1,), 0.5, 0.0, True, True)
    rep = LimitReport((1.5,), (0.1,), 0.5, 1e-2, True, False)
    with pytest.raises(AttributeError):
        rep.c_n = 1.0


def test_reports_are_deterministic():
    a = sigma_limit_error("gaussian", np.eye(1), [1.9, 1.99], c_n=cn(1))
    b = sigma_limit_error("gaussian", np.eye(1), [1.9, 1.99], c_n=cn(1))
    assert a.sigmas == b.sigmas
    assert a.errors == b.errors
    assert a.passed == b.passed
