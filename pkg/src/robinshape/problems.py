"""State and adjoint solves, tracking costs and shape gradients on Gamma.

Two formulations are supported:

* Neumann tracking (cost J_N): prescribe the Dirichlet datum f on Sigma,
  solve for u_D and compare its flux with the measured g.
* Dirichlet tracking (cost J_D): prescribe the flux g on Sigma, solve for
  u_N and compare its trace with the measured f.

Boundary data are functions of the polar angle t = atan2(y, x) of the
Sigma nodes.
"""

from __future__ import annotations

import ast
import enum
import functools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np
from scipy.interpolate import CubicSpline

from . import fem
from .fem import Factorization, ScalarField, SparseSystem
from .geometry import CurveFrame, Side, arc_derivative, curve_frame
from .mesh import AnnularMesh

__all__ = [
    "Formulation",
    "BoundaryFunction",
    "BoundarySamples",
    "CauchyPair",
    "MeasurementSet",
    "RobinSolver",
    "robin_solver",
    "solve_state_dirichlet",
    "solve_state_neumann",
    "solve_adjoint_dirichlet",
    "solve_adjoint_neumann",
    "recovered_flux",
    "cost",
    "shape_gradient_GN",
    "shape_gradient_GD",
    "directional_derivative",
    "gamma_frame",
    "Evaluation",
    "evaluate",
    "write_cauchy_csv",
    "read_cauchy_csv",
]


class Formulation(enum.Enum):
    NEUMANN_TRACKING = "N"
    DIRICHLET_TRACKING = "D"

    @classmethod
    def parse(cls, s: Union[str, "Formulation"]) -> "Formulation":
        if isinstance(s, cls):
            return s
        key = str(s).strip().upper()
        aliases = {"N": "N", "J_N": "N", "JN": "N", "NEUMANN": "N", "D": "D", "J_D": "D", "JD": "D", "DIRICHLET": "D"}
        if key not in aliases:
            raise ValueError(f"unknown formulation {s!r} (use N or D)")
        return cls(aliases[key])


# ---------------------------------------------------------------------------
# boundary data
# ---------------------------------------------------------------------------

_ALLOWED_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
}
_ALLOWED_NODES = (
    ast.Expression,
    ast.BinOp,
    ast.UnaryOp,
    ast.Call,
    ast.Name,
    ast.Load,
    ast.Constant,
    ast.Add,
    ast.Sub,
    ast.Mult,
    ast.Div,
    ast.Pow,
    ast.USub,
    ast.UAdd,
)


class BoundaryFunction:
    """Closed-form datum in the boundary angle, e.g. ``"sin(2*t)"``."""

    def __init__(self, expr: str):
        self.expr = str(expr).strip()
        tree = ast.parse(self.expr, mode="eval")
        for node in ast.walk(tree):
            if not isinstance(node, _ALLOWED_NODES):
                raise ValueError(f"unsupported syntax in boundary function {self.expr!r}")
            if isinstance(node, ast.Name) and node.id not in _ALLOWED_FUNCS and node.id not in ("t", "pi"):
                raise ValueError(f"unknown name {node.id!r} in boundary function {self.expr!r}")
            if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in _ALLOWED_FUNCS):
                raise ValueError(f"unsupported call in boundary function {self.expr!r}")
        self._code = compile(tree, "<boundary function>", "eval")

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        value = eval(self._code, {"__builtins__": {}}, {**_ALLOWED_FUNCS, "t": t, "pi": math.pi})
        return np.broadcast_to(np.asarray(value, dtype=float), t.shape).copy()

    def __repr__(self) -> str:
        return f"BoundaryFunction({self.expr!r})"

    def __eq__(self, other) -> bool:
        return isinstance(other, BoundaryFunction) and other.expr == self.expr

    def __hash__(self) -> int:
        return hash(self.expr)


@dataclass(frozen=True, eq=False)
class BoundarySamples:
    """Nodal samples on Sigma at angles ``t``; evaluation at other angles
    uses periodic cubic interpolation (arc length on the unit circle)."""

    t: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.mod(np.asarray(self.t, dtype=float), 2 * np.pi)
        v = np.asarray(self.values, dtype=float)
        if t.shape != v.shape or t.ndim != 1 or len(t) < 4:
            raise ValueError("samples need matching 1-D angle and value arrays (at least 4)")
        order = np.argsort(t, kind="stable")
        object.__setattr__(self, "t", t[order])
        object.__setattr__(self, "values", v[order])

    @functools.cached_property
    def _spline(self) -> CubicSpline:
        t = np.concatenate([self.t, [self.t[0] + 2 * np.pi]])
        v = np.concatenate([self.values, [self.values[0]]])
        return CubicSpline(t, v, bc_type="periodic")

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self._spline(self.t[0] + np.mod(t - self.t[0], 2 * np.pi))


BoundaryData = Union[BoundaryFunction, BoundarySamples, Callable[[np.ndarray], np.ndarray]]


def boundary_angle(points: np.ndarray) -> np.ndarray:
    return np.mod(np.arctan2(points[:, 1], points[:, 0]), 2 * np.pi)


def _on_sigma(data, mesh: AnnularMesh, order: int = 1) -> np.ndarray:
    """Evaluate boundary data at the Sigma DOFs of a mesh."""
    dm = fem.dofmap(mesh, order)
    idx = dm.loops["sigma"]
    if isinstance(data, np.ndarray) or isinstance(data, (list, tuple)):
        v = np.asarray(data, dtype=float)
        if v.shape != idx.shape:
            raise ValueError(f"expected {len(idx)} Sigma values, got {v.shape}")
        return v
    if np.isscalar(data):
        return np.full(len(idx), float(data))
    return np.asarray(data(boundary_angle(dm.coords[idx])), dtype=float)


@dataclass(frozen=True, eq=False)
class CauchyPair:
    """Prescribed datum and its measured counterpart on Sigma.

    Neumann tracking: prescribed = f (Dirichlet), measured = g (flux).
    Dirichlet tracking: prescribed = g (flux), measured = f (trace).
    """

    prescribed: BoundaryData
    measured: BoundaryData
    formulation: Formulation

    def prescribed_on(self, mesh: AnnularMesh, order: int = 1) -> np.ndarray:
        return _on_sigma(self.prescribed, mesh, order)

    def measured_on(self, mesh: AnnularMesh, order: int = 1) -> np.ndarray:
        return _on_sigma(self.measured, mesh, order)


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    pairs: tuple[CauchyPair, ...]

    def __post_init__(self):
        pairs = tuple(self.pairs)
        object.__setattr__(self, "pairs", pairs)
        if not 1 <= len(pairs) <= 5:
            raise ValueError(f"a measurement set holds 1 to 5 pairs, got {len(pairs)}")
        if len({p.formulation for p in pairs}) != 1:
            raise ValueError("all pairs of a measurement set must share one formulation")

    @property
    def formulation(self) -> Formulation:
        return self.pairs[0].formulation

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    def first(self, m: int) -> "MeasurementSet":
        return MeasurementSet(self.pairs[:m])


# ---------------------------------------------------------------------------
# cached P1 operators per mesh
# ---------------------------------------------------------------------------


class RobinSolver:
    """Factorized P1 Robin operators on one mesh.

    Holds the matrix with Sigma pinned (Dirichlet states and p_D) and the
    full matrix (Neumann states and p_N); both are reused across all
    measurements and right-hand sides.
    """

    def __init__(self, mesh: AnnularMesh, alpha: float):
        self.mesh = mesh
        self.alpha = float(alpha)
        self.system = fem.assemble_robin_system(mesh, alpha, 1)
        sigma = mesh.sigma_loop
        self.sigma_mass = fem.boundary_mass_matrix(mesh, "sigma", 1)
        self.sigma_weights = fem.loop_weights(mesh, "sigma", 1)
        self._dirichlet = Factorization(fem.apply_dirichlet(self.system, np.zeros(len(sigma))))
        self._neumann = Factorization(self.system)

    def dirichlet(self, sigma_values: np.ndarray, tag: str | None = None) -> ScalarField:
        x = np.zeros(self.mesh.n_nodes)
        x[self.mesh.sigma_loop] = sigma_values
        rhs = -(self.system.matrix @ x)
        x[self._dirichlet.free] = self._dirichlet.solve_free(rhs[self._dirichlet.free])
        return ScalarField(self.mesh, x, 1, tag)

    def neumann(self, sigma_load: np.ndarray, tag: str | None = None) -> ScalarField:
        """Solve a(u, psi) = sum_i load_i psi_i with ``load`` on Sigma nodes
        given as already-integrated nodal loads."""
        rhs = np.zeros(self.mesh.n_nodes)
        rhs[self.mesh.sigma_loop] = sigma_load
        return ScalarField(self.mesh, self._neumann.solve(rhs), 1, tag)

    def flux(self, u: ScalarField) -> np.ndarray:
        return fem.boundary_flux_recovery(self.mesh, u, "sigma")


@functools.lru_cache(maxsize=4)
def robin_solver(mesh: AnnularMesh, alpha: float) -> RobinSolver:
    return RobinSolver(mesh, alpha)


def _sigma_integrated(mesh: AnnularMesh, values: np.ndarray) -> np.ndarray:
    """Consistent load vector int_Sigma v psi_i for nodal v."""
    idx = mesh.sigma_loop
    M = fem.boundary_mass_matrix(mesh, "sigma", 1)
    full = np.zeros(mesh.n_nodes)
    full[idx] = values
    return (M @ full)[idx]


# ---------------------------------------------------------------------------
# states and adjoints
# ---------------------------------------------------------------------------


def solve_state_dirichlet(mesh: AnnularMesh, alpha: float, f: BoundaryData) -> ScalarField:
    return robin_solver(mesh, alpha).dirichlet(_on_sigma(f, mesh), tag="u_D")


def solve_state_neumann(mesh: AnnularMesh, alpha: float, g: BoundaryData) -> ScalarField:
    return robin_solver(mesh, alpha).neumann(_sigma_integrated(mesh, _on_sigma(g, mesh)), tag="u_N")


def recovered_flux(mesh: AnnularMesh, u: ScalarField) -> np.ndarray:
    return fem.boundary_flux_recovery(mesh, u, "sigma")


def solve_adjoint_dirichlet(mesh: AnnularMesh, alpha: float, u_D: ScalarField, g: BoundaryData) -> ScalarField:
    """p_D: harmonic, Robin on Gamma, p_D = (flux of u_D) - g on Sigma."""
    residual = recovered_flux(mesh, u_D) - _on_sigma(g, mesh)
    return robin_solver(mesh, alpha).dirichlet(residual, tag="p_D")


def solve_adjoint_neumann(mesh: AnnularMesh, alpha: float, u_N: ScalarField, f: BoundaryData) -> ScalarField:
    """p_N: harmonic, Robin on Gamma, flux u_N - f on Sigma.

    The Sigma load uses the same trapezoid weights as the cost, so p_N is
    the exact discrete adjoint of the discrete J_D with respect to u_N.
    """
    residual = u_N.on_loop("sigma") - _on_sigma(f, mesh)
    solver = robin_solver(mesh, alpha)
    return solver.neumann(solver.sigma_weights * residual, tag="p_N")


def cost(mesh: AnnularMesh, state: ScalarField, pair: CauchyPair) -> float:
    """Half the squared L2(Sigma) misfit, by the trapezoid rule."""
    if pair.formulation is Formulation.NEUMANN_TRACKING:
        if state.tag not in (None, "u_D"):
            raise ValueError(f"Neumann tracking needs the Dirichlet state u_D, got {state.tag}")
        misfit = recovered_flux(mesh, state) - pair.measured_on(mesh)
    else:
        if state.tag not in (None, "u_N"):
            raise ValueError(f"Dirichlet tracking needs the Neumann state u_N, got {state.tag}")
        misfit = state.on_loop("sigma") - pair.measured_on(mesh)
    return 0.5 * fem.boundary_integral(misfit**2, mesh, "sigma")


# ---------------------------------------------------------------------------
# shape gradients
# ---------------------------------------------------------------------------


def gamma_frame(mesh: AnnularMesh) -> CurveFrame:
    return curve_frame(mesh.gamma_polyline(), Side.INNER)


def _robin_product_terms(mesh: AnnularMesh, u: ScalarField, p: ScalarField, alpha: float):
    P = mesh.gamma_polyline()
    frame = curve_frame(P, Side.INNER)
    ug, pg = u.on_loop("gamma"), p.on_loop("gamma")
    tangential = arc_derivative(ug, P) * arc_derivative(pg, P)
    # d_nu u = -alpha u on Gamma (Robin condition)
    normal = alpha * (frame.curvature - alpha) * ug * pg
    return tangential, normal


def shape_gradient_GN(mesh: AnnularMesh, u_D: ScalarField, p_D: ScalarField, alpha: float) -> np.ndarray:
    """G_N = d_s u_D d_s p_D + alpha (d_nu u_D + kappa u_D) p_D on Gamma nodes."""
    tangential, normal = _robin_product_terms(mesh, u_D, p_D, alpha)
    return tangential + normal


def shape_gradient_GD(mesh: AnnularMesh, u_N: ScalarField, p_N: ScalarField, alpha: float) -> np.ndarray:
    """G_D = -d_s u_N d_s p_N - alpha (d_nu u_N + kappa u_N) p_N on Gamma nodes."""
    tangential, normal = _robin_product_terms(mesh, u_N, p_N, alpha)
    return -(tangential + normal)


def directional_derivative(G, V, frame: CurveFrame, mesh: AnnularMesh) -> float:
    """Trapezoid approximation of int_Gamma G (nu . V) ds.

    ``V`` may be given on the Gamma nodes only or on every mesh node.
    """
    G = np.asarray(G, dtype=float)
    V = np.asarray(V, dtype=float)
    if V.shape == (mesh.n_nodes, 2):
        V = V[mesh.gamma_loop]
    if G.shape != (mesh.n_gamma,) or V.shape != (mesh.n_gamma, 2):
        raise ValueError("gradient and field must be given on the Gamma nodes")
    vn = np.einsum("ij,ij->i", frame.normal, V)
    return float(np.sum(frame.weight * G * vn))


# ---------------------------------------------------------------------------
# all measurements at once
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Evaluation:
    costs: np.ndarray
    gradients: list | None
    states: list
    adjoints: list | None

    @property
    def total(self) -> float:
        return float(np.sum(self.costs))


def _evaluate_one(mesh: AnnularMesh, alpha: float, pair: CauchyPair, gradient: bool):
    if pair.formulation is Formulation.NEUMANN_TRACKING:
        u = solve_state_dirichlet(mesh, alpha, pair.prescribed)
        J = cost(mesh, u, pair)
        if not gradient:
            return J, None, u, None
        p = solve_adjoint_dirichlet(mesh, alpha, u, pair.measured)
        return J, shape_gradient_GN(mesh, u, p, alpha), u, p
    u = solve_state_neumann(mesh, alpha, pair.prescribed)
    J = cost(mesh, u, pair)
    if not gradient:
        return J, None, u, None
    p = solve_adjoint_neumann(mesh, alpha, u, pair.measured)
    return J, shape_gradient_GD(mesh, u, p, alpha), u, p


def evaluate(
    mesh: AnnularMesh,
    alpha: float,
    data: MeasurementSet | Sequence[CauchyPair],
    gradient: bool = True,
    threads: int = 1,
) -> Evaluation:
    """Costs (and optionally gradients) for every measurement on one mesh.

    With ``threads > 1`` the measurements are solved concurrently; results
    are collected in measurement order, so sums do not depend on timing.
    """
    pairs = list(data)
    robin_solver(mesh, alpha)  # factorize once before fanning out
    if threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(lambda pr: _evaluate_one(mesh, alpha, pr, gradient), pairs))
    else:
        out = [_evaluate_one(mesh, alpha, pr, gradient) for pr in pairs]
    costs = np.array([o[0] for o in out])
    if gradient:
        return Evaluation(costs, [o[1] for o in out], [o[2] for o in out], [o[3] for o in out])
    return Evaluation(costs, None, [o[2] for o in out], None)


# ---------------------------------------------------------------------------
# Cauchy data files
# ---------------------------------------------------------------------------


def write_cauchy_csv(path, pair: CauchyPair, index: int) -> None:
    if not isinstance(pair.measured, BoundarySamples):
        raise TypeError("only sampled measurements can be written")
    lines = [f"# cauchy v1 formulation={pair.formulation.value} index={index}"]
    if isinstance(pair.prescribed, BoundaryFunction):
        lines.append(f"# prescribed={pair.prescribed.expr}")
    lines.append("t,value")
    lines += [f"{t!r},{v!r}" for t, v in zip(pair.measured.t.tolist(), pair.measured.values.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_cauchy_csv(path, prescribed: BoundaryData | None = None) -> tuple[CauchyPair, int]:
    """Read a Cauchy CSV; the prescribed datum comes from the file's
    ``# prescribed=`` line unless given explicitly."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# cauchy v1"):
        raise ValueError(f"{path}: missing '# cauchy v1' header")
    meta = dict(tok.split("=", 1) for tok in lines[0].split()[3:])
    try:
        formulation = Formulation.parse(meta["formulation"])
        index = int(meta["index"])
    except (KeyError, ValueError):
        raise ValueError(f"{path}: header needs formulation=<N|D> and index=<i>") from None
    t, v = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if line.startswith("# prescribed=") and prescribed is None:
            prescribed = BoundaryFunction(line.split("=", 1)[1])
            continue
        if not line or line.startswith("#") or line == "t,value":
            continue
        try:
            a, b = line.split(",")
            t.append(float(a))
            v.append(float(b))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: malformed row {line!r}") from None
    if prescribed is None:
        raise ValueError(f"{path}: no prescribed datum recorded or given")
    return CauchyPair(prescribed, BoundarySamples(np.array(t), np.array(v)), formulation), index
