"""Shape Hessian probes at the exact inclusion.

At the optimum the Hessian of the Neumann-tracking cost reduces to the
squared Sigma flux of the shape derivative u' of the state.  This module
computes that quadratic form from a u' solve and, independently, from a
second difference of the cost along a normal perturbation, and reports
how both decay as the perturbation oscillates faster.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fem
from .fem import Factorization, ScalarField
from .geometry import CurveFrame, Polyline, Side, arc_derivative, curve_frame
from .mesh import AnnularMesh, MeshError, deform, min_signed_area_ratio, triangulate_annulus
from .problems import (
    Formulation,
    MeasurementSet,
    evaluate,
    gamma_frame,
    robin_solver,
    solve_state_dirichlet,
    solve_state_neumann,
)

__all__ = [
    "upsilon",
    "solve_uprime",
    "hessian_quadratic_exact",
    "normal_extension",
    "hessian_fd_probe",
    "oscillating_normal",
    "HessianProbeReport",
    "spectrum_decay_report",
    "write_report",
]


def upsilon(m: AnnularMesh, u: ScalarField, frame: CurveFrame, Vn, alpha: float) -> np.ndarray:
    """Nodal d/ds(Vn du/ds) + alpha (alpha - kappa) u Vn on Gamma."""
    Vn = np.asarray(Vn, dtype=float)
    if Vn.shape != (m.n_gamma,) or frame.curvature.shape != (m.n_gamma,):
        raise ValueError(f"expected {m.n_gamma} Gamma values")
    P = m.gamma_polyline(check=False)
    ug = u.on_loop("gamma")
    return arc_derivative(Vn * arc_derivative(ug, P), P) + alpha * (alpha - frame.curvature) * ug * Vn


def _upsilon_load(m: AnnularMesh, u: ScalarField, frame: CurveFrame, Vn: np.ndarray, alpha: float) -> np.ndarray:
    """Load vector int_Gamma Upsilon psi_i on the Gamma nodes.

    The divergence term is integrated by parts around the closed curve,
    -int Vn u_s psi_s, so only first arc derivatives of P1 data appear.
    """
    ug = u.on_loop("gamma")
    L = m.gamma_polyline(check=False).edge_lengths
    du = (np.roll(ug, -1) - ug) / L  # per edge
    vn_edge = 0.5 * (Vn + np.roll(Vn, -1))
    flux = vn_edge * du  # Vn u_s on each edge; psi_s = -1/L at its start, +1/L at its end
    tangential = flux - np.roll(flux, 1)
    return tangential + frame.weight * alpha * (alpha - frame.curvature) * ug * Vn


def solve_uprime(
    m: AnnularMesh,
    alpha: float,
    u: ScalarField,
    Vn,
    formulation=Formulation.NEUMANN_TRACKING,
) -> ScalarField:
    """Harmonic u' with Robin load Upsilon(u)[Vn] on Gamma.

    Sigma carries u' = 0 for the Dirichlet state (Neumann tracking) and a
    homogeneous flux for the Neumann state (Dirichlet tracking).
    """
    formulation = Formulation.parse(formulation)
    Vn = np.asarray(Vn, dtype=float)
    if Vn.shape != (m.n_gamma,):
        raise ValueError(f"expected {m.n_gamma} Gamma values, got {Vn.shape}")
    frame = gamma_frame(m)
    load = np.zeros(m.n_nodes)
    load[m.gamma_loop] = _upsilon_load(m, u, frame, Vn, alpha)
    solver = robin_solver(m, alpha)
    if formulation is Formulation.NEUMANN_TRACKING:
        lu = solver._dirichlet
        x = np.zeros(m.n_nodes)
        x[lu.free] = lu.solve_free(load[lu.free])
    else:
        x = solver._neumann.solve(load)
    return ScalarField(m, x, 1, "u_prime")


def hessian_quadratic_exact(m: AnnularMesh, uprime: ScalarField, formulation=Formulation.NEUMANN_TRACKING) -> float:
    """int_Sigma (d_nu u')^2 for Neumann tracking, int_Sigma u'^2 for Dirichlet tracking."""
    if Formulation.parse(formulation) is Formulation.NEUMANN_TRACKING:
        v = fem.boundary_flux_recovery(m, uprime, "sigma")
    else:
        v = uprime.on_loop("sigma")
    return fem.boundary_integral(v**2, m, "sigma")


def normal_extension(m: AnnularMesh, Vn) -> np.ndarray:
    """Volume field with V = Vn nu on Gamma and V = 0 on Sigma, extended by
    the (-Laplace + I) smoother with both loops pinned."""
    Vn = np.asarray(Vn, dtype=float)
    frame = gamma_frame(m)
    A = (fem.stiffness_matrix(m, 1) + fem.mass_matrix(m, 1)).tocsr()
    system = fem.SparseSystem(A, np.zeros(m.n_nodes), fem.dofmap(m, 1))
    system = fem.apply_dirichlet(system, np.zeros(m.n_sigma), "sigma")
    system = fem.apply_dirichlet(system, np.zeros(m.n_gamma), "gamma")
    lu = Factorization(system)
    V = np.zeros((m.n_nodes, 2))
    V[m.gamma_loop] = Vn[:, None] * frame.normal
    rhs = -(A @ V)
    V[lu.free] = lu.solve_free(rhs[lu.free])
    return V


def oscillating_normal(m: AnnularMesh, k: int) -> np.ndarray:
    """cos(k theta) on Gamma, theta = 2 pi (arc length)/(perimeter), unit L2(Gamma) norm."""
    P = m.gamma_polyline(check=False)
    theta = 2 * np.pi * P.arc_parameter() / P.length
    v = np.cos(k * theta)
    w = gamma_frame(m).weight
    return v / np.sqrt(np.sum(w * v * v))


def _exact_mesh(exact: Polyline, outer: Polyline, h: float, seed) -> AnnularMesh:
    return triangulate_annulus(outer, exact, h, seed=seed)


def hessian_fd_probe(
    exact: Polyline | AnnularMesh,
    outer: Polyline | None,
    data: MeasurementSet,
    alpha: float,
    Vn,
    t: float,
    h: float = 0.02,
    seed: int | None = None,
) -> float:
    """(J(t) + J(-t) - 2 J(0)) / t^2 along the extension of Vn nu.

    ``exact`` may be a ready mesh of the exact annulus, in which case
    ``outer``, ``h`` and ``seed`` are ignored.
    """
    m = exact if isinstance(exact, AnnularMesh) else _exact_mesh(exact, outer, h, seed)
    Vn = np.asarray(Vn, dtype=float)
    if not np.any(Vn):
        return 0.0
    V = normal_extension(m, Vn)
    if min(min_signed_area_ratio(m, V, t), min_signed_area_ratio(m, V, -t)) <= 0:
        raise MeshError(f"perturbation of size t = {t:g} folds the mesh; try a smaller t")
    J0 = evaluate(m, alpha, data, gradient=False).total
    Jp = evaluate(deform(m, V, t), alpha, data, gradient=False).total
    Jm = evaluate(deform(m, V, -t), alpha, data, gradient=False).total
    return (Jp + Jm - 2.0 * J0) / (t * t)


def _states(m: AnnularMesh, alpha: float, data: MeasurementSet):
    if data.formulation is Formulation.NEUMANN_TRACKING:
        return [solve_state_dirichlet(m, alpha, p.prescribed) for p in data]
    return [solve_state_neumann(m, alpha, p.prescribed) for p in data]


def quadratic_form_exact(m: AnnularMesh, alpha: float, data: MeasurementSet, Vn, states=None) -> float:
    """Sum over measurements of the u'-based quadratic form."""
    states = _states(m, alpha, data) if states is None else states
    total = 0.0
    for u in states:
        up = solve_uprime(m, alpha, u, Vn, data.formulation)
        total += hessian_quadratic_exact(m, up, data.formulation)
    return total


@dataclass
class HessianProbeReport:
    k: list[int]
    q_exact: list[float]
    q_fd: list[float]
    t: float
    h: float
    flags: list[str] = field(default_factory=list)

    @property
    def decay_exact(self) -> float:
        return self.q_exact[-1] / self.q_exact[0]

    @property
    def decay_fd(self) -> float:
        return self.q_fd[-1] / self.q_fd[0]

    def ratio_to_k0(self) -> list[float]:
        return [q / self.q_exact[0] for q in self.q_exact]


def _check_report(r: HessianProbeReport) -> list[str]:
    flags = []
    for name, qs in (("q_exact", r.q_exact), ("q_fd", r.q_fd)):
        top = max(abs(q) for q in qs)
        for k, q in zip(r.k, qs):
            if q < -1e-10 * top:
                flags.append(f"{name} negative at k={k}: {q:.3e}")
        inversions = [r.k[i + 1] for i in range(len(qs) - 1) if qs[i + 1] > qs[i]]
        if len(inversions) > 1:
            flags.append(f"{name} increases at k={inversions}")
        elif inversions:
            flags.append(f"{name} single inversion at k={inversions[0]}")
    return flags


def spectrum_decay_report(
    exact: Polyline,
    outer: Polyline,
    data: MeasurementSet,
    alpha: float,
    k_list: Sequence[int] = (2, 4, 8, 16),
    t: float | None = None,
    h: float = 0.02,
    seed: int | None = None,
    threads: int = 1,
) -> HessianProbeReport:
    k_list = [int(k) for k in k_list]
    if not k_list or any(b <= a for a, b in zip(k_list, k_list[1:])) or k_list[0] < 0:
        raise ValueError("k_list must be a non-empty increasing list of non-negative integers")
    m = _exact_mesh(exact, outer, h, seed)
    if t is None:
        t = 1e-3 * m.gamma_polyline(check=False).diameter
    states = _states(m, alpha, data)

    def probe(k):
        Vn = oscillating_normal(m, k)
        return quadratic_form_exact(m, alpha, data, Vn, states), hessian_fd_probe(m, None, data, alpha, Vn, t)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(probe, k_list))
    else:
        out = [probe(k) for k in k_list]
    report = HessianProbeReport(k_list, [o[0] for o in out], [o[1] for o in out], t, h)
    report.flags = _check_report(report)
    return report


def write_report(path, report: HessianProbeReport) -> None:
    lines = ["k,q_exact,q_fd,ratio_to_k0"]
    for k, qe, qf, r in zip(report.k, report.q_exact, report.q_fd, report.ratio_to_k0()):
        lines.append(f"{k},{qe!r},{qf!r},{r!r}")
    Path(path).write_text("\n".join(lines) + "\n")
