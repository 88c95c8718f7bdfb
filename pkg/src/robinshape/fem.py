"""Lagrange P1/P2 finite elements for the Robin Laplacian on an annular mesh.

The discrete bilinear form is

    a(u, v) = int_Omega grad u . grad v  +  alpha int_Gamma u v

P1 is used for inversion; P2 (straight-sided) only for synthesizing data.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .mesh import AnnularMesh, unique_edges

__all__ = [
    "SolverError",
    "DofMap",
    "dofmap",
    "ScalarField",
    "SparseSystem",
    "stiffness_matrix",
    "mass_matrix",
    "boundary_mass_matrix",
    "assemble_robin_system",
    "apply_dirichlet",
    "solve_spd",
    "Factorization",
    "boundary_flux_recovery",
    "boundary_integral",
    "l2_norm",
    "l2_error",
]

RTOL = 1e-10


class SolverError(RuntimeError):
    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


# ---------------------------------------------------------------------------
# degrees of freedom
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DofMap:
    """Degree-of-freedom layout.

    For order 2 the edge-midpoint DOFs are numbered after all vertices.
    ``loops[name]`` lists the DOFs along a boundary loop in curve order
    (vertex, midpoint, vertex, ...), and ``loop_elements[name]`` holds one
    row per boundary edge: (start, end) for P1, (start, mid, end) for P2.
    """

    mesh: AnnularMesh
    order: int
    n_dofs: int
    cells: np.ndarray
    coords: np.ndarray
    loops: dict = field(default_factory=dict)
    loop_elements: dict = field(default_factory=dict)


@functools.lru_cache(maxsize=16)
def dofmap(mesh: AnnularMesh, order: int = 1) -> DofMap:
    if order not in (1, 2):
        raise ValueError(f"element order must be 1 or 2, got {order}")
    n = mesh.n_nodes
    loops = {"sigma": mesh.sigma_loop, "gamma": mesh.gamma_loop}
    if order == 1:
        elements = {k: np.stack([v, np.roll(v, -1)], axis=1) for k, v in loops.items()}
        return DofMap(mesh, 1, n, mesh.triangles, mesh.nodes, loops, elements)

    edges = unique_edges(mesh.triangles)
    keys = edges[:, 0] * n + edges[:, 1]

    def edge_id(a, b):
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        return np.searchsorted(keys, lo * n + hi)

    t = mesh.triangles
    mids = np.stack([edge_id(t[:, 0], t[:, 1]), edge_id(t[:, 1], t[:, 2]), edge_id(t[:, 2], t[:, 0])], axis=1)
    cells = np.concatenate([t, n + mids], axis=1)
    coords = np.vstack([mesh.nodes, 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])])
    p2_loops, p2_elements = {}, {}
    for name, v in loops.items():
        w = np.roll(v, -1)
        m = n + edge_id(v, w)
        p2_loops[name] = np.stack([v, m], axis=1).ravel()
        p2_elements[name] = np.stack([v, m, w], axis=1)
    return DofMap(mesh, 2, n + len(edges), cells, coords, p2_loops, p2_elements)


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Nodal (P1) or nodal-plus-midpoint (P2) coefficients on a mesh.

    ``tag`` optionally names what the field solves (``"u_D"``, ``"p_N"``...),
    which lets cost evaluation reject a state of the wrong formulation.
    """

    mesh: AnnularMesh
    values: np.ndarray
    order: int = 1
    tag: str | None = None

    def __post_init__(self):
        n = dofmap(self.mesh, self.order).n_dofs
        if np.shape(self.values) != (n,):
            raise ValueError(f"order-{self.order} field needs {n} coefficients, got {np.shape(self.values)}")

    @property
    def dofs(self) -> DofMap:
        return dofmap(self.mesh, self.order)

    def on_loop(self, which: str) -> np.ndarray:
        """Values at the vertices of a boundary loop, in loop order."""
        return self.values[self.mesh.loop(which)]

    def __add__(self, other: "ScalarField") -> "ScalarField":
        return replace(self, values=self.values + other.values, tag=None)

    def __sub__(self, other: "ScalarField") -> "ScalarField":
        return replace(self, values=self.values - other.values, tag=None)

    def __mul__(self, c: float) -> "ScalarField":
        return replace(self, values=c * self.values, tag=None)

    __rmul__ = __mul__


# ---------------------------------------------------------------------------
# element matrices
# ---------------------------------------------------------------------------


def _barycentric_gradients(nodes: np.ndarray, tris: np.ndarray):
    p0, p1, p2 = nodes[tris[:, 0]], nodes[tris[:, 1]], nodes[tris[:, 2]]
    det = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])
    area = 0.5 * det
    # grad lambda_i = rot90(opposite edge) / (2 area)
    g = np.empty((len(tris), 3, 2))
    for i, (a, b) in enumerate(((p1, p2), (p2, p0), (p0, p1))):
        g[:, i, 0] = (a[:, 1] - b[:, 1]) / det
        g[:, i, 1] = (b[:, 0] - a[:, 0]) / det
    return g, area


_QUAD3 = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
_QUAD6_W = np.array([0.223381589678011] * 3 + [0.109951743655322] * 3)
_QUAD6 = np.array(
    [
        [0.108103018168070, 0.445948490915965, 0.445948490915965],
        [0.445948490915965, 0.108103018168070, 0.445948490915965],
        [0.445948490915965, 0.445948490915965, 0.108103018168070],
        [0.816847572980459, 0.091576213509771, 0.091576213509771],
        [0.091576213509771, 0.816847572980459, 0.091576213509771],
        [0.091576213509771, 0.091576213509771, 0.816847572980459],
    ]
)


def _p2_values(lam: np.ndarray) -> np.ndarray:
    l0, l1, l2 = lam
    return np.array([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1), 4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0])


def _p2_gradients(lam: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradients of the six P2 basis functions at one barycentric point."""
    l0, l1, l2 = lam
    g0, g1, g2 = g[:, 0], g[:, 1], g[:, 2]
    return np.stack(
        [
            (4 * l0 - 1) * g0,
            (4 * l1 - 1) * g1,
            (4 * l2 - 1) * g2,
            4 * (l1 * g0 + l0 * g1),
            4 * (l2 * g1 + l1 * g2),
            4 * (l0 * g2 + l2 * g0),
        ],
        axis=1,
    )


def _scatter(cells: np.ndarray, local: np.ndarray, n: int) -> sp.csr_matrix:
    k = cells.shape[1]
    rows = np.repeat(cells, k, axis=1).ravel()
    cols = np.tile(cells, (1, k)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def stiffness_matrix(mesh: AnnularMesh, order: int = 1) -> sp.csr_matrix:
    dm = dofmap(mesh, order)
    g, area = _barycentric_gradients(mesh.nodes, mesh.triangles)
    if order == 1:
        local = area[:, None, None] * np.einsum("tik,tjk->tij", g, g)
    else:
        local = np.zeros((len(area), 6, 6))
        for lam in _QUAD3:
            G = _p2_gradients(lam, g)
            local += np.einsum("tik,tjk->tij", G, G) / 3.0
        local *= area[:, None, None]
    return _scatter(dm.cells, local, dm.n_dofs)


def mass_matrix(mesh: AnnularMesh, order: int = 1) -> sp.csr_matrix:
    dm = dofmap(mesh, order)
    _, area = _barycentric_gradients(mesh.nodes, mesh.triangles)
    if order == 1:
        ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
        local = area[:, None, None] * ref[None]
    else:
        ref = np.zeros((6, 6))
        for w, lam in zip(_QUAD6_W, _QUAD6):
            phi = _p2_values(lam)
            ref += w * np.outer(phi, phi)
        local = area[:, None, None] * ref[None]
    return _scatter(dm.cells, local, dm.n_dofs)


_EDGE_MASS = {
    1: np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0,
    2: np.array([[4.0, 2.0, -1.0], [2.0, 16.0, 2.0], [-1.0, 2.0, 4.0]]) / 30.0,
}


def _loop_lengths(dm: DofMap, which: str) -> np.ndarray:
    el = dm.loop_elements[which]
    a, b = dm.coords[el[:, 0]], dm.coords[el[:, -1]]
    return np.hypot(*(b - a).T)


def boundary_mass_matrix(mesh: AnnularMesh, which: str, order: int = 1) -> sp.csr_matrix:
    """Consistent mass matrix of one boundary loop, in global DOF numbering."""
    dm = dofmap(mesh, order)
    which = _loop_name(which)
    L = _loop_lengths(dm, which)
    local = L[:, None, None] * _EDGE_MASS[order][None]
    return _scatter(dm.loop_elements[which], local, dm.n_dofs)


def _loop_name(which: str) -> str:
    w = which.lower()
    if w in ("sigma", "outer"):
        return "sigma"
    if w in ("gamma", "inner"):
        return "gamma"
    raise ValueError(f"unknown boundary loop {which!r}")


# ---------------------------------------------------------------------------
# systems
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SparseSystem:
    """Symmetric matrix, right-hand side and pinned (Dirichlet) DOFs.

    After :func:`apply_dirichlet` the right-hand side already carries the
    lifted contribution of the pinned values, so the free block solves
    ``A_ff x_f = rhs_f``.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    dofs: DofMap
    fixed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    fixed_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def free(self) -> np.ndarray:
        mask = np.ones(self.dofs.n_dofs, dtype=bool)
        mask[self.fixed] = False
        return np.flatnonzero(mask)

    def with_rhs(self, rhs) -> "SparseSystem":
        return replace(self, rhs=np.asarray(rhs, dtype=float))


def assemble_robin_system(mesh: AnnularMesh, alpha: float, order: int = 1) -> SparseSystem:
    """Stiffness plus alpha times the Gamma boundary mass; zero right-hand side."""
    if not alpha > 0:
        raise ValueError(f"Robin coefficient must be positive, got {alpha}")
    A = stiffness_matrix(mesh, order) + alpha * boundary_mass_matrix(mesh, "gamma", order)
    dm = dofmap(mesh, order)
    return SparseSystem(A.tocsr(), np.zeros(dm.n_dofs), dm)


def apply_dirichlet(system: SparseSystem, sigma_values, which: str = "sigma") -> SparseSystem:
    """Pin the DOFs of a boundary loop and lift their values into the RHS."""
    idx = system.dofs.loops[_loop_name(which)]
    values = np.asarray(sigma_values, dtype=float)
    if values.shape != idx.shape:
        raise ValueError(f"expected {len(idx)} boundary values, got {values.shape}")
    fixed = np.concatenate([system.fixed, idx])
    fixed_values = np.concatenate([system.fixed_values, values])
    lift = np.zeros(system.dofs.n_dofs)
    lift[idx] = values
    rhs = system.rhs - system.matrix @ lift
    return replace(system, rhs=rhs, fixed=fixed, fixed_values=fixed_values)


class Factorization:
    """Sparse LU of the free block, reusable across right-hand sides."""

    def __init__(self, system: SparseSystem):
        self.system = system
        self.free = system.free
        A = system.matrix
        self.A_ff = A[self.free][:, self.free].tocsc()
        self._lu = splu(self.A_ff) if len(self.free) else None

    def solve_free(self, b_free: np.ndarray) -> np.ndarray:
        if self._lu is None:
            return np.zeros(0)
        b_free = np.asarray(b_free, dtype=float)
        x = self._lu.solve(b_free)
        norm_b = np.linalg.norm(b_free, axis=0)
        res = np.linalg.norm(self.A_ff @ x - b_free, axis=0)
        worst = float(np.max(res / np.where(norm_b > 0, norm_b, 1.0)))
        if not np.isfinite(worst) or worst > RTOL:
            raise SolverError(f"linear solve failed: relative residual {worst:.3e}", worst)
        return x

    def solve(self, rhs=None, fixed_values=None) -> np.ndarray:
        """Full coefficient vector for a (possibly new) RHS and pinned values."""
        s = self.system
        rhs = s.rhs if rhs is None else np.asarray(rhs, dtype=float)
        fv = s.fixed_values if fixed_values is None else np.asarray(fixed_values, dtype=float)
        x = np.zeros(s.dofs.n_dofs)
        x[s.fixed] = fv
        x[self.free] = self.solve_free(rhs[self.free])
        return x


def solve_spd(system: SparseSystem, tag: str | None = None) -> ScalarField:
    x = Factorization(system).solve()
    return ScalarField(system.dofs.mesh, x, system.dofs.order, tag)


# ---------------------------------------------------------------------------
# boundary quantities
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=16)
def _loop_mass_lu(mesh: AnnularMesh, which: str, order: int):
    dm = dofmap(mesh, order)
    idx = dm.loops[which]
    M = boundary_mass_matrix(mesh, which, order)[idx][:, idx].tocsc()
    return splu(M)


def boundary_flux_recovery(mesh: AnnularMesh, u: ScalarField, which: str) -> np.ndarray:
    """Variational normal derivative of ``u`` on a boundary loop.

    Solves M_loop q = (K u)|_loop with K the stiffness matrix alone, i.e.
    the residual of a harmonic field against the loop's basis functions.
    Returns q at the loop DOFs (vertices and, for P2, midpoints) in loop
    order.
    """
    which = _loop_name(which)
    if u.mesh is not mesh:
        raise ValueError("field lives on a different mesh")
    dm = dofmap(mesh, u.order)
    idx = dm.loops[which]
    if len(idx) == 0:
        raise ValueError(f"loop {which} has no edges")
    r = (stiffness_matrix(mesh, u.order) @ u.values)[idx]
    return _loop_mass_lu(mesh, which, u.order).solve(r)


def loop_weights(mesh: AnnularMesh, which: str, order: int = 1) -> np.ndarray:
    """Quadrature weights at loop DOFs (row sums of the loop mass matrix):
    the trapezoid rule for P1, Simpson's rule for P2."""
    which = _loop_name(which)
    dm = dofmap(mesh, order)
    L = _loop_lengths(dm, which)
    if order == 1:
        return 0.5 * (L + np.roll(L, 1))
    w = np.empty(2 * len(L))
    w[0::2] = (L + np.roll(L, 1)) / 6.0
    w[1::2] = 2.0 * L / 3.0
    return w


def boundary_integral(values, mesh: AnnularMesh, which: str, order: int = 1) -> float:
    values = np.asarray(values, dtype=float)
    w = loop_weights(mesh, which, order)
    if values.shape != w.shape:
        raise ValueError(f"expected {len(w)} loop values, got {values.shape}")
    return float(w @ values)


def l2_norm(u: ScalarField) -> float:
    return float(np.sqrt(max(u.values @ (mass_matrix(u.mesh, u.order) @ u.values), 0.0)))


def l2_error(u: ScalarField, exact) -> float:
    """L2(Omega) norm of u - exact, by a 6-point degree-4 rule per triangle."""
    mesh = u.mesh
    dm = u.dofs
    _, area = _barycentric_gradients(mesh.nodes, mesh.triangles)
    p = mesh.nodes[mesh.triangles]
    coef = u.values[dm.cells]
    total = 0.0
    for w, lam in zip(_QUAD6_W, _QUAD6):
        xy = np.einsum("i,tik->tk", lam, p)
        phi = lam if u.order == 1 else _p2_values(lam)
        uh = coef @ phi
        total += w * np.sum(area * (uh - exact(xy[:, 0], xy[:, 1])) ** 2)
    return float(np.sqrt(total))
