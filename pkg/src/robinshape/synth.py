"""Synthetic Cauchy data from forward solves on the exact geometry.

Data are computed on a finer mesh than the inversion uses, with quadratic
elements and a different node layout, so the inversion never sees its own
discretization reflected in the measurements.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import fem
from .fem import Factorization, ScalarField
from .geometry import Polyline
from .mesh import triangulate_annulus
from .problems import (
    BoundaryFunction,
    BoundarySamples,
    CauchyPair,
    Formulation,
    MeasurementSet,
    boundary_angle,
    _on_sigma,
)

__all__ = ["default_catalog", "synthesize", "SYNTH_SEED"]

SYNTH_SEED = 7919


def default_catalog(formulation, M: int = 4) -> list[BoundaryFunction]:
    """Prescribed data f^(i) (Neumann tracking) or g^(i) (Dirichlet tracking)."""
    formulation = Formulation.parse(formulation)
    if not 1 <= M <= 5:
        raise ValueError(f"M must be between 1 and 5, got {M}")
    if formulation is Formulation.NEUMANN_TRACKING:
        exprs = ["sin(t)", "cos(t)", "sin(2*t)", "cos(2*t)", "sin(3*t)"]
    else:
        exprs = [f"sin({i + 1}*t/2)" if i % 2 else f"cos({i}*t/2)" for i in range(1, 6)]
    return [BoundaryFunction(e) for e in exprs[:M]]


def _edge_mean_flux(q: np.ndarray, coords: np.ndarray):
    """Simpson mean of a P2 loop flux over each boundary edge.

    The pointwise P2 flux alternates between vertex and midpoint DOFs
    because the straight-sided outer loop only approximates the circle;
    edge means cancel that alternation.  Returns (angles, values) at the
    edge midpoints.
    """
    qa, qm = q[0::2], q[1::2]
    qb = np.roll(qa, -1)
    return boundary_angle(coords[1::2]), (qa + 4.0 * qm + qb) / 6.0


def synthesize(
    exact_inner: Polyline,
    outer: Polyline,
    alpha: float,
    prescribed: Sequence,
    formulation,
    h_fine: float = 0.015,
    order: int = 2,
    seed: int | None = SYNTH_SEED,
) -> MeasurementSet:
    """Measured data for every prescribed datum on the exact annulus."""
    formulation = Formulation.parse(formulation)
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    mesh = triangulate_annulus(outer, exact_inner, h_fine, seed=seed)
    system = fem.assemble_robin_system(mesh, alpha, order)
    dm = fem.dofmap(mesh, order)
    sig = dm.loops["sigma"]
    coords = dm.coords[sig]

    pairs = []
    if formulation is Formulation.NEUMANN_TRACKING:
        lu = Factorization(fem.apply_dirichlet(system, np.zeros(len(sig))))
        for f in prescribed:
            x = np.zeros(dm.n_dofs)
            x[sig] = _on_sigma(f, mesh, order)
            rhs = -(system.matrix @ x)
            x[lu.free] = lu.solve_free(rhs[lu.free])
            q = fem.boundary_flux_recovery(mesh, ScalarField(mesh, x, order, "u_D"), "sigma")
            if order == 2:
                t, g = _edge_mean_flux(q, coords)
            else:
                t, g = boundary_angle(coords), q
            pairs.append(CauchyPair(f, BoundarySamples(t, g), formulation))
    else:
        lu = Factorization(system)
        M = fem.boundary_mass_matrix(mesh, "sigma", order)
        for g in prescribed:
            load = np.zeros(dm.n_dofs)
            load[sig] = _on_sigma(g, mesh, order)
            x = lu.solve(M @ load)
            pairs.append(CauchyPair(g, BoundarySamples(boundary_angle(coords), x[sig]), formulation))
    return MeasurementSet(tuple(pairs))
