import numpy as np
import pytest
import scipy.sparse as sp

from robinshape import fem
from robinshape.fem import (
    Factorization,
    ScalarField,
    SolverError,
    SparseSystem,
    apply_dirichlet,
    assemble_robin_system,
    boundary_flux_recovery,
    boundary_integral,
    boundary_mass_matrix,
    dofmap,
    solve_spd,
    stiffness_matrix,
)
from robinshape.mesh import AnnularMesh

from conftest import ALPHA, B_RADIAL


def radial_exact(x, y):
    return 1.0 + B_RADIAL * np.log(np.hypot(x, y))


def radial_solve(m, order=1):
    system = assemble_robin_system(m, ALPHA, order)
    system = apply_dirichlet(system, np.ones(len(system.dofs.loops["sigma"])))
    return solve_spd(system)


def test_reference_triangle_stiffness():
    m = AnnularMesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]), 0, 0, 1.0)
    K = stiffness_matrix(m).toarray()
    np.testing.assert_allclose(K, 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]]), atol=1e-15)


def test_gamma_edge_mass_contribution(radial_mesh_factory):
    m = radial_mesh_factory(0.1)
    A = assemble_robin_system(m, 2.5).matrix
    R = (A - stiffness_matrix(m)).tocsr()
    g = m.gamma_loop
    L = np.hypot(*(m.nodes[np.roll(g, -1)] - m.nodes[g]).T)
    np.testing.assert_allclose(R[g, np.roll(g, -1)].A1, 2.5 * L / 6, rtol=1e-12)
    np.testing.assert_allclose(R.diagonal()[g], 2.5 * (L + np.roll(L, 1)) / 3, rtol=1e-12)
    assert np.all(R.diagonal()[m.sigma_loop] == 0)


def test_constants_in_stiffness_kernel(radial_mesh_factory):
    m = radial_mesh_factory(0.05)
    A = assemble_robin_system(m, ALPHA).matrix
    one = np.ones(m.n_nodes)
    np.testing.assert_allclose(A @ one, ALPHA * (boundary_mass_matrix(m, "gamma") @ one), atol=1e-12)


@pytest.mark.parametrize("order", [1, 2])
def test_symmetry(kite_mesh, order):
    A = assemble_robin_system(kite_mesh, ALPHA, order).matrix
    assert abs(A - A.T).max() <= 1e-12 * abs(A).max()


def test_nonpositive_alpha_rejected(radial_mesh_factory):
    with pytest.raises(ValueError):
        assemble_robin_system(radial_mesh_factory(0.1), 0.0)


def test_zero_dirichlet_leaves_rhs(radial_mesh_factory):
    m = radial_mesh_factory(0.1)
    s = assemble_robin_system(m, ALPHA).with_rhs(np.arange(m.n_nodes, dtype=float))
    np.testing.assert_array_equal(apply_dirichlet(s, np.zeros(m.n_sigma)).rhs, s.rhs)


def test_dirichlet_count_mismatch(radial_mesh_factory):
    m = radial_mesh_factory(0.1)
    with pytest.raises(ValueError):
        apply_dirichlet(assemble_robin_system(m, ALPHA), np.zeros(m.n_sigma + 1))


def test_pinning_every_dof_returns_prescribed(radial_mesh_factory):
    m = radial_mesh_factory(0.1)
    s = assemble_robin_system(m, ALPHA)
    vals = np.sin(np.arange(m.n_nodes))
    pinned = SparseSystem(s.matrix, s.rhs, s.dofs, np.arange(m.n_nodes), vals)
    np.testing.assert_array_equal(solve_spd(pinned).values, vals)


def test_zero_data_gives_zero_fields(radial_mesh_factory):
    m = radial_mesh_factory(0.1)
    s = assemble_robin_system(m, ALPHA)
    assert np.all(solve_spd(apply_dirichlet(s, np.zeros(m.n_sigma))).values == 0)
    assert np.all(solve_spd(s).values == 0)  # pure Robin-Neumann problem, g = 0


def test_indefinite_system_reports_residual(radial_mesh_factory):
    m = radial_mesh_factory(0.1)
    # the pure stiffness matrix with no constraint is singular
    s = SparseSystem(stiffness_matrix(m).tocsr(), np.ones(m.n_nodes), dofmap(m))
    with pytest.raises((SolverError, RuntimeError)):
        Factorization(s).solve()


def test_radial_nodal_error_second_order(radial_mesh_factory):
    errs = []
    for h in (0.04, 0.02):
        m = radial_mesh_factory(h)
        u = radial_solve(m)
        errs.append(np.abs(u.values - radial_exact(*m.nodes.T)).max())
    assert errs[1] < 1e-4
    assert errs[0] / errs[1] > 3.0


def test_radial_l2_error_ratio(radial_mesh_factory):
    e = [fem.l2_error(radial_solve(radial_mesh_factory(h)), radial_exact) for h in (0.04, 0.02)]
    assert 3.4 <= e[0] / e[1] <= 4.6


def test_galerkin_orthogonality(radial_mesh_factory):
    m = radial_mesh_factory(0.05)
    s = apply_dirichlet(assemble_robin_system(m, ALPHA), np.ones(m.n_sigma))
    u = solve_spd(s)
    r = s.matrix @ u.values
    free = s.free
    assert np.abs(r[free]).max() <= 1e-10 * np.abs(s.matrix @ np.ones(m.n_nodes)).max() + 1e-12


def test_radial_flux_on_sigma(radial_mesh_factory):
    max_err, weak_err = [], []
    for h in (0.04, 0.02, 0.01):
        m = radial_mesh_factory(h)
        e = boundary_flux_recovery(m, radial_solve(m), "sigma") - B_RADIAL
        max_err.append(np.abs(e).max())
        weak_err.append(abs(boundary_integral(e, m, "sigma")))
    # pointwise: first order on unstructured meshes, within 1e-3 at h = 0.01
    assert max_err[2] <= 1e-3
    assert max_err[0] > max_err[1] > max_err[2]
    # against smooth weights the variational flux converges at second order
    assert weak_err[0] / weak_err[1] > 3.0 and weak_err[1] / weak_err[2] > 3.0


def test_squared_flux_error_integral(radial_mesh_factory):
    sq = []
    for h in (0.04, 0.02, 0.01):
        m = radial_mesh_factory(h)
        e = boundary_flux_recovery(m, radial_solve(m), "sigma") - B_RADIAL
        sq.append(boundary_integral(e**2, m, "sigma"))
    assert sq[2] <= 1e-2 * 0.01**2
    assert sq[0] > sq[1] > sq[2]


def test_flux_of_constant_is_zero(radial_mesh_factory):
    m = radial_mesh_factory(0.05)
    u = ScalarField(m, np.full(m.n_nodes, 3.0))
    np.testing.assert_allclose(boundary_flux_recovery(m, u, "sigma"), 0.0, atol=1e-11)
    np.testing.assert_allclose(boundary_flux_recovery(m, u, "gamma"), 0.0, atol=1e-11)


def test_robin_identity_on_gamma(radial_mesh_factory):
    errs = []
    for h in (0.04, 0.02):
        m = radial_mesh_factory(h)
        u = radial_solve(m)
        q = boundary_flux_recovery(m, u, "gamma")
        errs.append(np.abs(q + ALPHA * u.on_loop("gamma")).max())
    # the residual on Gamma equals alpha M u exactly, so the identity is exact up to rounding
    assert max(errs) < 1e-9


def test_flux_conservation(kite_mesh):
    m = kite_mesh
    s = apply_dirichlet(assemble_robin_system(m, ALPHA), np.cos(np.arctan2(*m.nodes[m.sigma_loop].T[::-1])) + 2)
    u = solve_spd(s)
    out = boundary_integral(boundary_flux_recovery(m, u, "sigma"), m, "sigma")
    robin = ALPHA * boundary_integral(u.on_loop("gamma"), m, "gamma")
    assert out == pytest.approx(robin, rel=1e-9)


def test_flux_needs_edges():
    m = AnnularMesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]), 0, 0, 1.0)
    with pytest.raises(ValueError):
        boundary_flux_recovery(m, ScalarField(m, np.zeros(3)), "sigma")


def test_boundary_integral_examples(radial_mesh_factory):
    errs = []
    for h in (0.04, 0.02):
        m = radial_mesh_factory(h)
        t = np.arctan2(m.nodes[m.sigma_loop, 1], m.nodes[m.sigma_loop, 0])
        errs.append(abs(boundary_integral(np.ones_like(t), m, "sigma") - 2 * np.pi))
        assert abs(boundary_integral(np.sin(t), m, "sigma")) < 2 * h**2
    assert errs[0] < 2 * 0.04**2 and errs[0] / errs[1] > 3.0


def test_boundary_integral_size_mismatch(radial_mesh_factory):
    m = radial_mesh_factory(0.1)
    with pytest.raises(ValueError):
        boundary_integral(np.ones(m.n_sigma + 1), m, "sigma")


def test_p2_reproduces_quadratic(radial_mesh_factory):
    # x^2 - y^2 is harmonic and lies in the P2 space, so pinning both loops recovers it
    m = radial_mesh_factory(0.1)
    dm = dofmap(m, 2)
    x, y = dm.coords.T
    exact = x**2 - y**2
    K = stiffness_matrix(m, 2)
    s = SparseSystem(K.tocsr(), np.zeros(dm.n_dofs), dm)
    s = apply_dirichlet(s, exact[dm.loops["sigma"]], "sigma")
    s = apply_dirichlet(s, exact[dm.loops["gamma"]], "gamma")
    np.testing.assert_allclose(solve_spd(s).values, exact, atol=1e-10)


def test_p2_radial_error_limited_by_polygonal_boundary(radial_mesh_factory):
    # straight boundary edges cost O(h^2) for either order, so P2 only matches P1 here
    e1, e2 = [], []
    for h in (0.04, 0.02):
        m = radial_mesh_factory(h)
        e1.append(fem.l2_error(radial_solve(m, 1), radial_exact))
        e2.append(fem.l2_error(radial_solve(m, 2), radial_exact))
    assert 3.4 <= e2[0] / e2[1] <= 4.6
    assert e2[1] < 2 * e1[1]


def test_field_size_checked(radial_mesh_factory):
    m = radial_mesh_factory(0.1)
    with pytest.raises(ValueError):
        ScalarField(m, np.zeros(m.n_nodes + 1))
    with pytest.raises(ValueError):
        dofmap(m, 3)


def test_matrices_are_sparse(kite_mesh):
    assert sp.issparse(stiffness_matrix(kite_mesh))
