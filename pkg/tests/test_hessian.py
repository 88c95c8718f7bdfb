import numpy as np
import pytest

from robinshape import fem
from robinshape.fem import ScalarField
from robinshape.geometry import Circle, Kite, Polyline, Side, curve_frame, sample_boundary
from robinshape.hessian import (
    HessianProbeReport,
    _check_report,
    hessian_fd_probe,
    hessian_quadratic_exact,
    oscillating_normal,
    quadratic_form_exact,
    solve_uprime,
    spectrum_decay_report,
    upsilon,
    write_report,
)
from robinshape.mesh import AnnularMesh, MeshError, deform, triangulate_annulus
from robinshape.problems import BoundaryFunction, gamma_frame, solve_state_dirichlet

from conftest import ALPHA

# reference run of this implementation on the h = 0.03 kite mesh with default seeds
FROZEN_UPSILON_NORM = 23.905962668185552
FROZEN_UPSILON_HEAD = [-0.7733265511085947, -1.6890561580127041]  # Gamma nodes 1 and 2
FROZEN_Q2 = 8.87511492259782


@pytest.fixture(scope="module")
def kite_state(kite_mesh):
    return solve_state_dirichlet(kite_mesh, ALPHA, BoundaryFunction("sin(t)"))


def _spectral_dt(v):
    n = len(v)
    k = np.fft.rfftfreq(n, 1.0 / n)
    return np.fft.irfft(1j * k * np.fft.rfft(v), n)


# --- Upsilon ----------------------------------------------------------------


def test_upsilon_zero_speed(kite_mesh, kite_state):
    Y = upsilon(kite_mesh, kite_state, gamma_frame(kite_mesh), np.zeros(kite_mesh.n_gamma), ALPHA)
    assert np.all(Y == 0)


def test_upsilon_of_constant_on_circle(unit_circle):
    r, c = 0.4, 1.7
    m = triangulate_annulus(unit_circle, sample_boundary(Circle((0.0, 0.0), r), 256), 0.05)
    Y = upsilon(m, ScalarField(m, np.full(m.n_nodes, c)), gamma_frame(m), np.ones(m.n_gamma), ALPHA)
    # the annulus normal on Gamma points at the origin, so its tangential divergence is -1/r
    np.testing.assert_allclose(Y, ALPHA * (ALPHA + 1 / r) * c, rtol=1e-3)


def test_upsilon_regression(kite_mesh, kite_state):
    Y = upsilon(kite_mesh, kite_state, gamma_frame(kite_mesh), oscillating_normal(kite_mesh, 2), ALPHA)
    assert np.linalg.norm(Y) == pytest.approx(FROZEN_UPSILON_NORM, rel=1e-9)
    np.testing.assert_allclose(Y[1:3], FROZEN_UPSILON_HEAD, rtol=1e-9)


def test_upsilon_matches_spectral_differentiation():
    # nodes exactly on the parametric kite; the oracle differentiates in t by FFT
    errs = []
    for n in (256, 512):
        t = 2 * np.pi * np.arange(n) / n
        z = Kite()(t)
        x, y = z.T
        m = AnnularMesh(z, np.zeros((0, 3), dtype=int), 0, n, 0.01)
        u = x * x - y * y + x + 0.5 * x * y
        Vn = np.cos(2 * t)
        Y = upsilon(m, ScalarField(m, u), curve_frame(Polyline(z), Side.INNER), Vn, ALPHA)
        xp, yp = _spectral_dt(x), _spectral_dt(y)
        speed = np.hypot(xp, yp)
        kappa = -(xp * _spectral_dt(yp) - yp * _spectral_dt(xp)) / speed**3
        exact = _spectral_dt(Vn * _spectral_dt(u) / speed) / speed + ALPHA * (ALPHA - kappa) * u * Vn
        errs.append(np.abs(Y - exact).max() / np.abs(exact).max())
    assert errs[1] < 0.02 and errs[0] / errs[1] > 3.5


def test_upsilon_size_checked(kite_mesh, kite_state):
    with pytest.raises(ValueError):
        upsilon(kite_mesh, kite_state, gamma_frame(kite_mesh), np.zeros(3), ALPHA)


# --- u' ---------------------------------------------------------------------


@pytest.mark.parametrize("formulation", ["N", "D"])
def test_uprime_zero_and_linear(kite_mesh, kite_state, formulation):
    assert np.all(solve_uprime(kite_mesh, ALPHA, kite_state, np.zeros(kite_mesh.n_gamma), formulation).values == 0)
    Vn = oscillating_normal(kite_mesh, 4)
    one = solve_uprime(kite_mesh, ALPHA, kite_state, Vn, formulation).values
    two = solve_uprime(kite_mesh, ALPHA, kite_state, 2 * Vn, formulation).values
    np.testing.assert_allclose(two, 2 * one, atol=1e-12 * np.abs(one).max())


def test_uprime_linearizes_the_state(unit_circle):
    # V is supported within 0.2 of Gamma; beyond that the nodes stay put, so the
    # nodal difference quotient there is the shape derivative itself
    m = triangulate_annulus(unit_circle, sample_boundary(Circle((0.0, 0.0), 0.5), 400), 0.02)
    f = BoundaryFunction("cos(t) + 0.5*sin(2*t)")
    u = solve_state_dirichlet(m, ALPHA, f)
    r = np.hypot(*m.nodes.T)
    th = np.arctan2(m.nodes[:, 1], m.nodes[:, 0])
    chi = np.clip(1 - (r - 0.5) / 0.2, 0, 1) ** 2
    V = (np.cos(2 * th) * chi)[:, None] * (-m.nodes / r[:, None])
    Vn = np.einsum("ij,ij->i", V[m.gamma_loop], gamma_frame(m).normal)
    up = solve_uprime(m, ALPHA, u, Vn).values
    far = r >= 0.7 + 1e-9
    w = np.asarray(fem.mass_matrix(m).sum(axis=1)).ravel()[far]
    errs = []
    for t in (1e-2, 5e-3):
        ut = solve_state_dirichlet(deform(m, V, t), ALPHA, f).values
        d = (ut - u.values - t * up)[far]
        errs.append(np.sqrt(np.sum(w * d * d)))
    assert 3.4 <= errs[0] / errs[1] <= 4.6


# --- quadratic forms --------------------------------------------------------


def test_quadratic_exact_zero_and_even(kite_mesh, kite_state):
    z = ScalarField(kite_mesh, np.zeros(kite_mesh.n_nodes))
    assert hessian_quadratic_exact(kite_mesh, z) == 0.0
    Vn = oscillating_normal(kite_mesh, 2)
    a = hessian_quadratic_exact(kite_mesh, solve_uprime(kite_mesh, ALPHA, kite_state, Vn))
    b = hessian_quadratic_exact(kite_mesh, solve_uprime(kite_mesh, ALPHA, kite_state, -Vn))
    assert b == pytest.approx(a, rel=1e-12)


def test_q2_regression_and_fd_agreement(kite_mesh, kite_data_N):
    Vn = oscillating_normal(kite_mesh, 2)
    q = quadratic_form_exact(kite_mesh, ALPHA, kite_data_N, Vn)
    assert q == pytest.approx(FROZEN_Q2, rel=1e-9)
    t = 1e-3 * kite_mesh.gamma_polyline().diameter
    fd = hessian_fd_probe(kite_mesh, None, kite_data_N, ALPHA, Vn, t)
    assert abs(q - fd) <= 0.10 * fd


def test_fd_probe_zero_direction(kite_mesh, kite_data_N):
    assert hessian_fd_probe(kite_mesh, None, kite_data_N, ALPHA, np.zeros(kite_mesh.n_gamma), 1e-3) == 0.0


def test_fd_probe_even_and_stable(kite_mesh, kite_data_N):
    Vn = oscillating_normal(kite_mesh, 4)
    t = 1e-3 * kite_mesh.gamma_polyline().diameter
    q = hessian_fd_probe(kite_mesh, None, kite_data_N, ALPHA, Vn, t)
    assert hessian_fd_probe(kite_mesh, None, kite_data_N, ALPHA, -Vn, t) == q
    q_half = hessian_fd_probe(kite_mesh, None, kite_data_N, ALPHA, Vn, t / 2)
    assert abs(q_half - q) <= 0.25 * q


@pytest.mark.parametrize("c", [0.5, 2.0])
def test_quadratic_homogeneity(kite_mesh, kite_data_N, c):
    Vn = oscillating_normal(kite_mesh, 2)
    t = 1e-3 * kite_mesh.gamma_polyline().diameter
    qe = quadratic_form_exact(kite_mesh, ALPHA, kite_data_N, Vn)
    assert quadratic_form_exact(kite_mesh, ALPHA, kite_data_N, c * Vn) == pytest.approx(c * c * qe, rel=0.01)
    qf = hessian_fd_probe(kite_mesh, None, kite_data_N, ALPHA, Vn, t)
    assert hessian_fd_probe(kite_mesh, None, kite_data_N, ALPHA, c * Vn, t) == pytest.approx(c * c * qf, rel=0.01)


def test_fd_probe_refuses_folding_step(kite_mesh, kite_data_N):
    with pytest.raises(MeshError, match="smaller t"):
        hessian_fd_probe(kite_mesh, None, kite_data_N, ALPHA, oscillating_normal(kite_mesh, 16), 0.5)


def test_oscillating_normal_unit_norm(kite_mesh):
    w = gamma_frame(kite_mesh).weight
    for k in (0, 2, 16):
        v = oscillating_normal(kite_mesh, k)
        assert np.sum(w * v * v) == pytest.approx(1.0, rel=1e-12)


# --- report -----------------------------------------------------------------


def test_report_flags():
    r = HessianProbeReport([2, 4, 8], [3.0, 2.0, 1.0], [3.0, 1.0, 2.0], 1e-3, 0.02)
    flags = _check_report(r)
    assert flags == ["q_fd single inversion at k=8"]
    r = HessianProbeReport([2, 4, 8], [3.0, 4.0, -1.0], [3.0, 4.0, 5.0], 1e-3, 0.02)
    flags = _check_report(r)
    assert any("q_exact negative at k=8" in f for f in flags)
    assert any("q_fd increases at k=[4, 8]" in f for f in flags)
    assert r.ratio_to_k0() == [1.0, 4.0 / 3.0, -1.0 / 3.0]


def test_small_report(tmp_path, kite, unit_circle, kite_data_N):
    rep = spectrum_decay_report(kite, unit_circle, kite_data_N, ALPHA, k_list=(2, 8), h=0.04)
    assert rep.t == pytest.approx(1e-3 * triangulate_annulus(unit_circle, kite, 0.04).gamma_polyline().diameter)
    assert all(q > 0 for q in rep.q_exact + rep.q_fd)
    assert not [f for f in rep.flags if "negative" in f]
    path = tmp_path / "hessian.csv"
    write_report(path, rep)
    lines = path.read_text().splitlines()
    assert lines[0] == "k,q_exact,q_fd,ratio_to_k0"
    assert [int(line.split(",")[0]) for line in lines[1:]] == [2, 8]
    assert float(lines[1].split(",")[3]) == 1.0


def test_report_rejects_bad_k_list(kite, unit_circle, kite_data_N):
    for bad in ((), (4, 2), (-1, 2)):
        with pytest.raises(ValueError):
            spectrum_decay_report(kite, unit_circle, kite_data_N, ALPHA, k_list=bad, h=0.1)
