import mpmath as mp
import numpy as np
import pytest

from ctribim.geometry import SphereField, frame_at
from ctribim.kernels import (
    ExpansionContext,
    KernelError,
    KernelParams,
    dg0_dn,
    dgk_dn,
    g0,
    gk,
    kij,
    kij_restricted,
    kreg_constant,
    kreg_kernel,
    s0,
    s0_samples,
    s1_12,
    tangential_distance,
)


def _mp_kernel(i, j, x, nx, y, ny, p, dps=50):
    """K_ij from mixed directional derivatives of G0 and Gk in high precision."""
    with mp.workdps(dps):
        x = [mp.mpf(float(v)) for v in x]
        y = [mp.mpf(float(v)) for v in y]
        nx = [mp.mpf(float(v)) for v in nx]
        ny = [mp.mpf(float(v)) for v in ny]
        k = mp.mpf(p.kappa)
        rei = mp.mpf(p.eps_e) / mp.mpf(p.eps_i)
        rie = 1 / rei

        def G(s, t, c0, ck):
            r = mp.sqrt(sum((x[a] + s * nx[a] - y[a] - t * ny[a]) ** 2 for a in range(3)))
            return (c0 - ck * mp.exp(-k * r)) / (4 * mp.pi * r)

        if (i, j) == (1, 1):
            val = mp.diff(lambda t: G(0, t, 1, rei), 0)
        elif (i, j) == (1, 2):
            val = G(0, 0, 1, 1)
        elif (i, j) == (2, 1):
            val = mp.diff(lambda s, t: G(s, t, 1, 1), (0, 0), (1, 1))
        else:
            val = mp.diff(lambda s: G(s, 0, 1, rie), 0)
        return float(val)


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# Fundamental solutions
# ---------------------------------------------------------------------------


def test_g0_unit_distance():
    assert g0([0, 0, 0], [1, 0, 0]) == pytest.approx(7.957747e-2, rel=1e-7)


def test_gk_reduces_to_g0():
    x, y = np.array([0.3, 0.1, -0.2]), np.array([1.0, 2.0, 0.5])
    assert gk(x, y, 0.0) == g0(x, y)


def test_gk_value():
    ref = float(mp.exp(-0.25) / (8 * mp.pi))
    assert gk([0, 0, 0], [0, 0, 2.0], 0.125) == pytest.approx(ref, rel=1e-14)


def test_coincident_points_rejected():
    with pytest.raises(KernelError):
        g0([1, 2, 3], [1, 2, 3])


def test_normal_derivatives_finite_difference():
    x, y, n = np.array([0.1, 0.2, 0.3]), np.array([1.0, -0.5, 0.7]), _unit([1, 2, -1])
    h = 1e-5
    fd = (g0(x, y + h * n) - g0(x, y - h * n)) / (2 * h)
    assert dg0_dn(x, y, n, wrt="y") == pytest.approx(fd, rel=1e-8)
    fd = (gk(x + h * n, y, 0.3) - gk(x - h * n, y, 0.3)) / (2 * h)
    assert dgk_dn(x, y, n, 0.3, wrt="x") == pytest.approx(fd, rel=1e-8)


# ---------------------------------------------------------------------------
# Coupled kernels
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("ij", [(1, 1), (1, 2), (2, 1), (2, 2)])
@pytest.mark.parametrize("r", [3.0, 0.4, 1e-2])
def test_kij_against_high_precision(ij, r, params):
    x = np.array([0.1, -0.2, 0.3])
    d = _unit([0.3, 0.9, -0.2])
    y = x + r * d
    nx, ny = _unit([1, 0.2, 0.1]), _unit([0.8, -0.3, 0.5])
    ref = _mp_kernel(*ij, x, nx, y, ny, params)
    assert kij(*ij, x, nx, y, ny, params) == pytest.approx(ref, rel=1e-10)


@pytest.mark.parametrize("r", [1e-4, 1e-6])
def test_k21_near_field(r, params):
    x = np.zeros(3)
    y = r * _unit([1.0, 0.4, 0.2])
    nx, ny = _unit([0.1, 0.2, 1.0]), _unit([0.0, 0.3, 1.0])
    ref = _mp_kernel(2, 1, x, nx, y, ny, params, dps=60)
    assert kij(2, 1, x, nx, y, ny, params) == pytest.approx(ref, rel=1e-8)


def test_kappa_zero_collapse():
    p = KernelParams(1.0, 80.0, 0.0)
    x, y = np.array([0.0, 0, 0]), np.array([0.3, 0.4, 0.5])
    nx, ny = _unit([1, 1, 0]), _unit([0, 1, 1])
    assert kij(1, 2, x, nx, y, ny, p) == 0.0
    assert kij(2, 1, x, nx, y, ny, p) == 0.0


def test_equal_dielectrics_k11():
    p = KernelParams(2.0, 2.0, 0.3)
    x, y = np.array([0.0, 0, 0]), np.array([0.3, 0.4, 0.5])
    nx, ny = _unit([1, 1, 0]), _unit([0, 1, 1])
    ref = dg0_dn(x, y, ny) - dgk_dn(x, y, ny, 0.3)
    assert kij(1, 1, x, nx, y, ny, p) == pytest.approx(ref, rel=1e-13)


def test_k12_symmetric(params, rng):
    x, y = rng.normal(size=(2, 3))
    n1, n2 = _unit(rng.normal(size=3)), _unit(rng.normal(size=3))
    assert kij(1, 2, x, n1, y, n2, params) == kij(1, 2, y, n2, x, n1, params)


def test_restricted_kernel_constant_along_normals(params):
    from ctribim.geometry import CartesianGrid, enumerate_tube
    r, h = 2.0, 0.25
    grid = CartesianGrid.centered(h, r + 3 * h)
    tube = enumerate_tube(SphereField(r), grid, 2 * h)
    # Nodes on the positive z axis share one normal line.
    c = (grid.dims[0] - 1) // 2
    on_axis = np.flatnonzero((tube.index[:, 0] == c) & (tube.index[:, 1] == c)
                             & (tube.points[:, 2] > 0))
    assert on_axis.size >= 3
    x, nx = np.array([r, 0, 0]), np.array([1.0, 0, 0])
    vals = kij_restricted(2, 1, x, nx, tube, on_axis, params)
    np.testing.assert_allclose(vals, vals[0], rtol=1e-14)


def test_restricted_antipodal_chord(params):
    r = 10.0
    x, nx = np.array([0, 0, r]), np.array([0, 0, 1.0])
    y, ny = np.array([0, 0, -r]), np.array([0, 0, -1.0])
    chord = 2 * r
    ref = (1 - np.exp(-params.kappa * chord)) / (4 * np.pi * chord)
    assert kij(1, 2, x, nx, y, ny, params) == pytest.approx(ref, rel=1e-14)


# ---------------------------------------------------------------------------
# Regularized kernels
# ---------------------------------------------------------------------------


def test_kreg_constants(params):
    for ij in [(1, 1), (2, 1), (2, 2)]:
        assert kreg_constant(*ij, 0.2, params) == 0.0
    with mp.workdps(40):
        k, t = mp.mpf(0.125), mp.mpf(0.2)
        ref = float((mp.exp(-k * t) - 1 + k * t) / (2 * mp.pi * k * t**2))
    assert kreg_constant(1, 2, 0.2, params) == pytest.approx(ref, rel=1e-12)
    assert ref == pytest.approx(9.8644e-3, rel=1e-4)


def test_kreg_small_tau_limit():
    p = KernelParams(1.0, 80.0, 0.7)
    for tau in (1e-4, 1e-6):
        assert kreg_constant(1, 2, tau, p) == pytest.approx(0.7 / (4 * np.pi), rel=1e-3)
    assert kreg_constant(1, 2, 0.3, KernelParams(1.0, 80.0, 0.0)) == 0.0


def test_kreg_constant_is_disc_average(params):
    # C = (1 / (pi tau^2)) * integral of K12 over the tangential disc of radius tau.
    tau = 0.6
    with mp.workdps(30):
        k = mp.mpf(params.kappa)
        integral = mp.quad(lambda s: 2 * mp.pi * s * (1 - mp.exp(-k * s)) / (4 * mp.pi * s),
                           [0, tau])
        ref = float(integral / (mp.pi * tau**2))
    assert kreg_constant(1, 2, tau, params) == pytest.approx(ref, rel=1e-12)


def test_kreg_kernel_switch(params):
    x, nx = np.zeros(3), np.array([0, 0, 1.0])
    near = np.array([0.1, 0.0, 0.05])
    far = np.array([0.5, 0.0, 0.05])
    n = np.array([0, 0, 1.0])
    assert kreg_kernel(2, 1, x, nx, near, n, 0.2, params) == 0.0
    assert kreg_kernel(2, 1, x, nx, far, n, 0.2, params) == kij(2, 1, x, nx, far, n, params)
    assert tangential_distance(x, nx, near) == pytest.approx(0.1)
    vec = kreg_kernel(1, 2, x, nx, np.array([near, far]), np.array([n, n]), 0.2, params)
    assert vec[0] == kreg_constant(1, 2, 0.2, params)
    assert vec[1] == kij(1, 2, x, nx, far, n, params)


# ---------------------------------------------------------------------------
# Expansion terms
# ---------------------------------------------------------------------------


def test_s0_plane():
    p = KernelParams(1.0, 80.0, 1.0)
    th = np.linspace(0, 2 * np.pi, 7)
    yhat = np.column_stack([np.cos(th), np.sin(th)])
    R = np.array([[0.6, -0.8], [0.8, 0.6]])
    ctx = ExpansionContext(R, [0.0, 0.0], 0.37)
    np.testing.assert_allclose(s0(1, 1, yhat, ctx, p), 0.0)
    np.testing.assert_allclose(s0(2, 1, yhat, ctx, p), 1 / (8 * np.pi), rtol=1e-14)
    np.testing.assert_array_equal(s0(1, 2, yhat, ctx, p), 0.0)


def test_s0_21_scales_with_kappa_squared():
    ctx = ExpansionContext(np.eye(2), [0.0, 0.0], 0.0)
    yhat = np.array([1.0, 0.0])
    a = s0(2, 1, yhat, ctx, KernelParams(1.0, 80.0, 0.125))
    assert a == pytest.approx(0.125**2 / (8 * np.pi), rel=1e-14)


def test_s1_12(params):
    assert s1_12(params) == pytest.approx(9.94718e-3, rel=1e-6)


def test_s0_sphere_constant(params):
    ctx = ExpansionContext(np.eye(2), [-0.1, -0.1], 0.0)
    th = np.linspace(0, 2 * np.pi, 9)
    yhat = np.column_stack([np.cos(th), np.sin(th)])
    ref = (1 - 80) * (-0.1) / (8 * np.pi)
    np.testing.assert_allclose(s0(1, 1, yhat, ctx, params), ref, rtol=1e-14)


def test_coefficient_collapse():
    p = KernelParams(3.0, 3.0, 0.2)
    ctx = ExpansionContext([[1.0, 0.2], [-0.1, 0.9]], [-0.3, 0.1], 0.2)
    yhat = np.array([[0.6, 0.8], [1.0, 0.0]])
    assert np.all(s0(1, 1, yhat, ctx, p) == 0.0)
    assert np.all(s0(2, 2, yhat, ctx, p) == 0.0)


def test_singular_D0_rejected():
    with pytest.raises(KernelError):
        ExpansionContext(np.eye(2), [-0.5, 0.0], 2.0)


def _plane_kernel(ij, u, eta, r, params):
    """Restricted kernel on the sphere along the plane z = r - eta, target at the pole."""
    sph = SphereField(r)
    target = np.array([0.0, 0.0, r])
    pts = np.column_stack([u[:, 0], u[:, 1], np.full(len(u), r - eta)])
    y = sph.closest_point(pts)
    ny = y / r
    return kij(*ij, target, np.array([0, 0, 1.0]), y, ny, params)


@pytest.mark.parametrize("eta", [0.0, 0.6])
@pytest.mark.parametrize("ij", [(1, 1), (2, 1), (2, 2)])
def test_expansion_residual_bounded(ij, eta, params):
    r = 10.0
    fr = frame_at(SphereField(r), [0.0, 0.0, r - eta])
    ctx = ExpansionContext(fr.A, fr.kappa, eta)
    yhat = _unit([0.6, -0.3])
    res = []
    # Offsets stop at 1e-3: below that, forming y - x from coordinates of
    # size r loses the O(|u|^2) normal component to round-off.
    for s in (1e-1, 3e-2, 1e-2, 3e-3, 1e-3):
        u = np.array([s * yhat])
        k = _plane_kernel(ij, u, eta, r, params)[0]
        res.append(abs(k - s0(*ij, yhat, ctx, params) / s))
    # Bounded residual: no 1/|u| growth over two decades.
    assert max(res) <= 1.5 * res[0]


def test_k12_expansion_second_term(params):
    r, eta = 10.0, 0.3
    yhat = _unit([1.0, 2.0])
    vals = [abs(_plane_kernel((1, 2), np.array([s * yhat]), eta, r, params)[0] - s1_12(params))
            for s in (1e-2, 1e-3, 1e-4)]
    assert vals[2] < vals[1] < vals[0]
    assert vals[2] < 1e-5


def test_limit_consistency_k21(params):
    r = 10.0
    yhat = _unit([0.3, 0.7])
    ctx = ExpansionContext(frame_at(SphereField(r), [0, 0, r]).A, [-0.1, -0.1], 0.0)
    ref = s0(2, 1, yhat, ctx, params)
    s = 1e-5
    k = _plane_kernel((2, 1), np.array([s * yhat]), 0.0, r, params)[0]
    assert abs(s * k - ref) <= 1e-4 * abs(ref)


def test_s0_samples_matches_s0(params):
    A = np.array([[[0.8, 0.1], [-0.2, 0.9]]])
    kap = np.array([[-0.2, 0.05]])
    eta = np.array([0.3])
    L = 16
    out = s0_samples(A, kap, eta, L, params)
    th = 2 * np.pi * np.arange(L) / L
    yhat = np.column_stack([np.cos(th), np.sin(th)])
    ctx = ExpansionContext(A[0], kap[0], 0.3)
    refs = [s0(1, 1, yhat, ctx, params), s0(2, 1, yhat, ctx, params), s0(2, 2, yhat, ctx, params)]
    for got, ref in zip(out, refs):
        np.testing.assert_allclose(np.asarray(got).reshape(-1), ref, rtol=1e-13)
