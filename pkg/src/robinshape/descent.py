"""Sobolev-gradient descent for the inclusion boundary.

Each iteration solves every state and adjoint, sums the shape gradients,
smooths the sum into a volume field V with an H1 solve, and moves the
mesh along V with an Armijo backtracking step.
"""

from __future__ import annotations

import enum
import functools
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import fem
from .fem import Factorization
from .geometry import GeometryError, Polyline, curve_frame, hausdorff_distance, Side
from .mesh import AnnularMesh, MeshError, deform, min_signed_area_ratio, triangulate_annulus
from .problems import MeasurementSet, directional_derivative, evaluate

log = logging.getLogger(__name__)

QUALITY_WARNING_ANGLE = 5.0  # degrees
NO_DESCENT = "no descent direction"

__all__ = [
    "TerminationReason",
    "DescentConfig",
    "IterationRecord",
    "ReconstructionResult",
    "LineSearchResult",
    "sobolev_gradient",
    "h1_norm",
    "aggregate",
    "line_search",
    "needs_remesh",
    "run_reconstruction",
    "write_history",
    "read_history",
]


class TerminationReason(enum.Enum):
    MAX_ITERATIONS = "MaxIterations"
    COST_STALLED = "CostStalled"
    STEP_VANISHED = "StepVanished"
    MESH_DEGENERATE = "MeshDegenerate"


@dataclass(frozen=True)
class DescentConfig:
    max_iterations: int = 300
    cost_tolerance: float = 1e-8
    armijo_c1: float = 1e-4
    backtrack_factor: float = 0.5
    step_fraction: float = 0.5  # initial max nodal displacement, in units of h
    area_ratio_floor: float = 0.1
    h: float = 0.03
    mesh_seed: int | None = None
    snapshot_every: int = 0
    remesh_min_angle: float = 0.0  # degrees; 0 keeps the initial mesh throughout
    remesh_edge_ratio: float = 2.0  # with remeshing on: also remesh when a Gamma edge leaves [h/ratio, h*ratio]
    remesh_attempts: int = 3
    min_angle_floor: float = 0.0  # degrees; a mesh below this stops the run (0 disables)
    threads: int = 1
    record_wall_time: bool = False

    def __post_init__(self):
        if not (isinstance(self.max_iterations, int) and self.max_iterations >= 0):
            raise ValueError("max_iterations must be a non-negative integer")
        for name in ("cost_tolerance", "step_fraction", "area_ratio_floor", "h"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.armijo_c1 < 1:
            raise ValueError("armijo_c1 must lie in (0, 1)")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError("backtrack_factor must lie in (0, 1)")
        if self.area_ratio_floor >= 1:
            raise ValueError("area_ratio_floor must be below 1")
        if self.remesh_min_angle < 0 or self.remesh_edge_ratio <= 1:
            raise ValueError("remesh_min_angle must be >= 0 and remesh_edge_ratio > 1")
        if self.remesh_attempts < 1 or self.min_angle_floor < 0:
            raise ValueError("remesh_attempts must be >= 1 and min_angle_floor >= 0")
        if self.snapshot_every < 0 or self.threads < 1:
            raise ValueError("snapshot_every must be >= 0 and threads >= 1")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    costs: tuple[float, ...]
    vnorm: float
    step: float
    hausdorff: float
    seconds: float

    @property
    def cost_total(self) -> float:
        return float(sum(self.costs))


@dataclass
class ReconstructionResult:
    final: Polyline
    history: list[IterationRecord]
    reason: TerminationReason
    snapshots: list[tuple[int, Polyline]] = field(default_factory=list)
    mesh: AnnularMesh | None = None
    message: str = ""
    min_angle: float = float("nan")  # smallest triangle angle of the final mesh, degrees


# ---------------------------------------------------------------------------
# smoothing
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=4)
def _h1_operator(mesh: AnnularMesh):
    A = (fem.stiffness_matrix(mesh, 1) + fem.mass_matrix(mesh, 1)).tocsr()
    system = fem.SparseSystem(A, np.zeros(mesh.n_nodes), fem.dofmap(mesh, 1))
    return A, Factorization(fem.apply_dirichlet(system, np.zeros(mesh.n_sigma)))


def sobolev_gradient(m: AnnularMesh, G_total) -> np.ndarray:
    """Vector field V, zero on Sigma, with (V, phi)_H1 = -int_Gamma G nu.phi.

    The Gamma load uses the same trapezoid weights as the directional
    derivative, so int_Gamma G nu.V = -|V|_H1^2 holds to solver precision.
    """
    G = np.asarray(G_total, dtype=float)
    if G.shape != (m.n_gamma,):
        raise ValueError(f"expected {m.n_gamma} Gamma values, got {G.shape}")
    frame = curve_frame(m.gamma_polyline(check=False), Side.INNER)
    _, lu = _h1_operator(m)
    load = -(frame.weight * G)[:, None] * frame.normal
    rhs = np.zeros((m.n_nodes, 2))
    rhs[m.gamma_loop] = load
    V = np.zeros((m.n_nodes, 2))
    V[lu.free] = lu.solve_free(rhs[lu.free])
    return V


def h1_norm(m: AnnularMesh, V) -> float:
    A, _ = _h1_operator(m)
    V = np.asarray(V, dtype=float)
    return float(np.sqrt(max(np.sum(V * (A @ V)), 0.0)))


def aggregate(gradients: Sequence) -> np.ndarray:
    """Nodewise sum of Gamma densities, in list order."""
    gradients = [np.asarray(g, dtype=float) for g in gradients]
    if not gradients:
        raise ValueError("no gradients to aggregate")
    shape = gradients[0].shape
    total = np.zeros(shape)
    for g in gradients:
        if g.shape != shape:
            raise ValueError("gradients live on different Gamma node sets")
        total = total + g
    return total


# ---------------------------------------------------------------------------
# line search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LineSearchResult:
    accepted: bool
    step: float
    cost: float
    mesh: AnnularMesh | None
    trials: int
    reason: str = ""


def line_search(
    m: AnnularMesh,
    V,
    J_current: float,
    dJ: float,
    evaluate_cost: Callable[[AnnularMesh], float],
    cfg: DescentConfig,
) -> LineSearchResult:
    """Backtracking from t0 = step_fraction * h / max|V| until the Armijo
    condition holds and no triangle shrinks below the area-ratio floor."""
    V = np.asarray(V, dtype=float)
    vmax = float(np.max(np.linalg.norm(V, axis=1))) if len(V) else 0.0
    if vmax == 0.0 or not dJ < 0:
        return LineSearchResult(False, 0.0, J_current, None, 0, NO_DESCENT)
    t0 = cfg.step_fraction * m.h_target / vmax
    t = t0
    trials = 0
    while t >= 1e-12 * t0:
        trials += 1
        if min_signed_area_ratio(m, V, t) >= cfg.area_ratio_floor:
            trial = deform(m, V, t)
            J = float(evaluate_cost(trial))
            if np.isfinite(J) and J <= J_current + cfg.armijo_c1 * t * dJ:
                return LineSearchResult(True, t, J, trial, trials)
        t *= cfg.backtrack_factor
    return LineSearchResult(False, 0.0, J_current, None, trials, "step vanished")


# ---------------------------------------------------------------------------
# main loop
# ---------------------------------------------------------------------------


def needs_remesh(m: AnnularMesh, cfg: DescentConfig) -> bool:
    """True when triangles got too thin or Gamma edges drifted from h."""
    if cfg.remesh_min_angle <= 0:
        return False
    if m.min_angle() < cfg.remesh_min_angle:
        return True
    L = m.gamma_polyline(check=False).edge_lengths
    r = cfg.remesh_edge_ratio
    return bool(L.max() > r * m.h_target or L.min() < m.h_target / r)


def _next_iterate(deformed: AnnularMesh, outer: Polyline, alpha, data, bound: float, cfg: DescentConfig):
    """Mesh and evaluation for the next iterate.

    Without remeshing this is the deformed mesh.  With remeshing enabled, a
    fresh triangulation replaces it only if its cost still meets the Armijo
    bound of the accepted step, so the recorded costs keep decreasing.
    """
    gamma = deformed.gamma_polyline(check=True)
    if needs_remesh(deformed, cfg):
        base = 0 if cfg.mesh_seed is None else cfg.mesh_seed
        for attempt in range(cfg.remesh_attempts):
            seed = cfg.mesh_seed if attempt == 0 else base + attempt
            candidate = triangulate_annulus(outer, gamma, cfg.h, seed=seed)
            ev = evaluate(candidate, alpha, data, gradient=True, threads=cfg.threads)
            if ev.total <= bound:
                return candidate, ev
    angle = deformed.min_angle()
    if angle < cfg.min_angle_floor:
        raise MeshError(f"minimum triangle angle {angle:.3g} deg fell below the floor {cfg.min_angle_floor:g} deg")
    return deformed, evaluate(deformed, alpha, data, gradient=True, threads=cfg.threads)


def run_reconstruction(
    cfg: DescentConfig,
    initial: Polyline,
    outer: Polyline,
    data: MeasurementSet,
    alpha: float,
    exact: Polyline | None = None,
    callback: Callable[[IterationRecord], None] | None = None,
) -> ReconstructionResult:
    start = time.perf_counter()
    mesh = triangulate_annulus(outer, initial, cfg.h, seed=cfg.mesh_seed)
    history: list[IterationRecord] = []
    snapshots: list[tuple[int, Polyline]] = []
    step = 0.0
    reason = TerminationReason.MAX_ITERATIONS
    message = ""
    ev = evaluate(mesh, alpha, data, gradient=True, threads=cfg.threads)

    k = 0
    prev_mesh = mesh
    while True:
        G = aggregate(ev.gradients)
        try:
            V = sobolev_gradient(mesh, G)
        except fem.SolverError as exc:
            # the new iterate is unusable; report the last recorded one
            if not history:
                raise
            reason, message = TerminationReason.MESH_DEGENERATE, str(exc)
            mesh = prev_mesh
            break
        vnorm = h1_norm(mesh, V)
        gamma = mesh.gamma_polyline(check=False)
        dH = hausdorff_distance(gamma, exact) if exact is not None else float("nan")
        secs = time.perf_counter() - start if cfg.record_wall_time else 0.0
        rec = IterationRecord(k, tuple(float(c) for c in ev.costs), vnorm, step, dH, secs)
        history.append(rec)
        if callback is not None:
            callback(rec)
        if cfg.snapshot_every and k % cfg.snapshot_every == 0:
            snapshots.append((k, gamma))
        if len(history) > 1 and abs(history[-2].cost_total - rec.cost_total) < cfg.cost_tolerance:
            reason = TerminationReason.COST_STALLED
            break
        if k >= cfg.max_iterations:
            reason = TerminationReason.MAX_ITERATIONS
            break

        dJ = directional_derivative(G, V, curve_frame(gamma, Side.INNER), mesh)
        cost_only = lambda trial: evaluate(trial, alpha, data, gradient=False, threads=cfg.threads).total
        try:
            ls = line_search(mesh, V, rec.cost_total, dJ, cost_only, cfg)
        except (MeshError, GeometryError, fem.SolverError) as exc:
            reason, message = TerminationReason.MESH_DEGENERATE, str(exc)
            break
        if not ls.accepted:
            # a vanishing gradient means the cost cannot move at all
            stalled = ls.reason == NO_DESCENT
            reason = TerminationReason.COST_STALLED if stalled else TerminationReason.STEP_VANISHED
            message = ls.reason
            break
        try:
            bound = rec.cost_total + cfg.armijo_c1 * ls.step * dJ
            new_mesh, ev = _next_iterate(ls.mesh, outer, alpha, data, bound, cfg)
        except (MeshError, GeometryError, fem.SolverError) as exc:
            reason, message = TerminationReason.MESH_DEGENERATE, str(exc)
            break
        prev_mesh, mesh, step = mesh, new_mesh, ls.step
        k += 1

    final = mesh.gamma_polyline(check=False)
    angle = mesh.min_angle()
    if angle < QUALITY_WARNING_ANGLE:
        log.warning("final mesh has a %.3g deg triangle; gradients near it are unreliable", angle)
    if cfg.snapshot_every and (not snapshots or snapshots[-1][0] != history[-1].iteration):
        snapshots.append((history[-1].iteration, final))
    return ReconstructionResult(final, history, reason, snapshots, mesh, message, angle)


# ---------------------------------------------------------------------------
# history files
# ---------------------------------------------------------------------------


def history_header(M: int) -> str:
    return ",".join(["iter", "cost_total"] + [f"cost_{i}" for i in range(1, M + 1)] + ["vnorm", "step", "hausdorff", "seconds"])


def write_history(path, history: Sequence[IterationRecord]) -> None:
    if not history:
        raise ValueError("empty history")
    M = len(history[0].costs)
    lines = [history_header(M)]
    for r in history:
        vals = [r.cost_total, *r.costs, r.vnorm, r.step, r.hausdorff, r.seconds]
        lines.append(",".join([str(r.iteration)] + [repr(float(v)) for v in vals]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_history(path) -> list[IterationRecord]:
    """Parse a history CSV; malformed rows are reported with their line number."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty history file")
    head = lines[0].split(",")
    if head[:2] != ["iter", "cost_total"] or head[-4:] != ["vnorm", "step", "hausdorff", "seconds"]:
        raise ValueError(f"{path}:1: unexpected history header")
    M = len(head) - 6
    if M < 1:
        raise ValueError(f"{path}:1: history has no cost columns")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        try:
            if len(cells) != len(head):
                raise ValueError
            it = int(cells[0])
            vals = [float(c) for c in cells[1:]]
        except ValueError:
            raise ValueError(f"{path}:{lineno}: malformed history row") from None
        out.append(IterationRecord(it, tuple(vals[1 : 1 + M]), vals[1 + M], vals[2 + M], vals[3 + M], vals[4 + M]))
    if not out:
        raise ValueError(f"{path}: history has no rows")
    return out
