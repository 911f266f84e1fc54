"""Step objective: kinetic transport cost plus free energy.

For densities rho (s, N), interior-face momenta m (s, N-1) and potential
phi (N+2 values including ghosts), the objective of one step of size tau is

    F =  (h / 2 tau) sum_{i,j} mhat_{ij}^2 / (rho_{ij} D_{ij})     kinetic
       + h sum_{i,j} rho_{ij} log rho_{ij}                         entropy
       + sum_j (eps_j / 8 h) (phi_{j+1} - phi_{j-1})^2             dielectric
       + boundary terms                                            boundary

where mhat is the face average of m with implicit zero wall fluxes.
Robin ends contribute (phi_0 + phi_1)^2 / (8 beta); Dirichlet ends
contribute -eps_wall * phi_b * (outward ghost difference) / h; flux
(Neumann) ends contribute nothing.  Any nonpositive density makes the
objective +inf, the barrier the line search relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mesh import Grid1D, face_average
from .model import BoundaryEnd, SampledModel
from .assembly import State, StateLayout


@dataclass(frozen=True)
class BoundaryTerm:
    """Objective contribution descriptor for one end.

    For Robin only ``beta`` matters; for Dirichlet only ``eps_phib``
    (dielectric at the wall times the prescribed potential); a flux end
    contributes nothing.
    """

    kind: str
    beta: float = 0.0
    eps_phib: float = 0.0

    @classmethod
    def from_end(cls, end: BoundaryEnd, eps_wall: float) -> "BoundaryTerm":
        return cls(kind=end.kind, beta=end.beta_eff,
                   eps_phib=eps_wall * end.phi_b if end.kind == "dirichlet" else 0.0)


@dataclass(frozen=True)
class ObjectiveParams:
    """Everything the objective needs besides the state itself."""

    tau: float
    h: float
    D_center: np.ndarray
    eps_center: np.ndarray
    left: BoundaryTerm
    right: BoundaryTerm

    @classmethod
    def from_model(cls, sm: SampledModel, grid: Grid1D, tau: float
                   ) -> "ObjectiveParams":
        return cls(tau=float(tau), h=grid.h,
                   D_center=sm.D_center, eps_center=sm.eps_center,
                   left=BoundaryTerm.from_end(sm.left, sm.eps_face[0]),
                   right=BoundaryTerm.from_end(sm.right, sm.eps_face[-1]))


@dataclass(frozen=True)
class EnergyBreakdown:
    """Objective value split into its four parts.

    ``total_objective`` is +inf when any density is nonpositive (the
    density-dependent parts are NaN then).  ``diagnostic_energy`` is the
    free energy alone: entropy + dielectric + boundary.
    """

    kinetic: float
    entropy: float
    dielectric: float
    boundary: float

    @property
    def total_objective(self) -> float:
        if math.isinf(self.kinetic):
            return math.inf
        return self.kinetic + self.diagnostic_energy

    @property
    def diagnostic_energy(self) -> float:
        return self.entropy + self.dielectric + self.boundary

    @property
    def finite(self) -> bool:
        return math.isfinite(self.total_objective)


def _boundary_energy(p: ObjectiveParams, phi: np.ndarray) -> float:
    total = 0.0
    lt, rt = p.left, p.right
    if lt.kind == "robin":
        total += (phi[0] + phi[1]) ** 2 / (8.0 * lt.beta)
    elif lt.kind == "dirichlet":
        total += -lt.eps_phib * (phi[0] - phi[1]) / p.h
    if rt.kind == "robin":
        total += (phi[-2] + phi[-1]) ** 2 / (8.0 * rt.beta)
    elif rt.kind == "dirichlet":
        total += -rt.eps_phib * (phi[-1] - phi[-2]) / p.h
    return total


def _phi_parts(p: ObjectiveParams, phi: np.ndarray) -> tuple[float, float]:
    dphi = phi[2:] - phi[:-2]
    dielectric = float(np.sum(p.eps_center / (8.0 * p.h) * dphi ** 2))
    return dielectric, _boundary_energy(p, phi)


def eval_objective(state: State, p: ObjectiveParams) -> EnergyBreakdown:
    """Evaluate the step objective, +inf outside the positive cone."""
    rho, m, phi = state.rho, state.m, state.phi
    dielectric, boundary = _phi_parts(p, phi)
    if np.any(rho <= 0.0) or not np.all(np.isfinite(rho)):
        return EnergyBreakdown(kinetic=math.inf, entropy=math.nan,
                               dielectric=dielectric, boundary=boundary)
    mhat = face_average(m)
    kinetic = (p.h / (2.0 * p.tau)) * float(np.sum(mhat ** 2 / (rho * p.D_center)))
    entropy = p.h * float(np.sum(rho * np.log(rho)))
    return EnergyBreakdown(kinetic=kinetic, entropy=entropy,
                           dielectric=dielectric, boundary=boundary)


def eval_energy(state: State, p: ObjectiveParams) -> float:
    """Free energy (entropy + dielectric + boundary) of a state."""
    return eval_objective(state, p).diagnostic_energy


def eval_gradient(state: State, p: ObjectiveParams) -> np.ndarray:
    """Analytic gradient of the objective in the flat state layout.

    Raises ValueError on nonpositive densities: the gradient only exists
    inside the positive cone.
    """
    layout = state.layout
    rho, m, phi = state.rho, state.m, state.phi
    if np.any(rho <= 0.0):
        raise ValueError("gradient undefined: nonpositive density")

    mhat = face_average(m)
    coeff = p.h / (2.0 * p.tau)

    g_rho = -coeff * mhat ** 2 / (rho ** 2 * p.D_center) \
        + p.h * (1.0 + np.log(rho))

    # d mhat_{ij} / d m_{i,j+-1/2} = 1/2, each interior face feeds two cells
    t = coeff * mhat / (rho * p.D_center)
    g_m = t[:, :-1] + t[:, 1:]

    g_phi = np.zeros(layout.N + 2)
    w = p.eps_center / (4.0 * p.h)
    g_phi[2:] += w * (phi[2:] - phi[:-2])
    g_phi[:-2] += w * (phi[:-2] - phi[2:])

    lt, rt = p.left, p.right
    if lt.kind == "robin":
        v = (phi[0] + phi[1]) / (4.0 * lt.beta)
        g_phi[0] += v
        g_phi[1] += v
    elif lt.kind == "dirichlet":
        g_phi[0] += -lt.eps_phib / p.h
        g_phi[1] += lt.eps_phib / p.h
    if rt.kind == "robin":
        v = (phi[-2] + phi[-1]) / (4.0 * rt.beta)
        g_phi[-2] += v
        g_phi[-1] += v
    elif rt.kind == "dirichlet":
        g_phi[-2] += rt.eps_phib / p.h
        g_phi[-1] += -rt.eps_phib / p.h

    g = np.empty(layout.dim)
    g[layout.rho_slice] = g_rho.ravel()
    g[layout.m_slice] = g_m.ravel()
    g[layout.phi_slice] = g_phi
    return g


def interp_identity_residuals(X0, X1, Y0, Y1, theta):
    """Residuals of the three convexity building blocks along the segment
    X(theta) = theta X0 + (1-theta) X1, Y(theta) likewise.

    Returns (r_sq, r_ent, r_ratio):
      r_sq     |X|^2 interpolation identity residual (exactly zero)
      r_ent    X log X midpoint defect, <= 0 with equality iff X0 == X1
      r_ratio  Y^2/X interpolation identity residual (exactly zero);
               requires X0, X1 > 0
    """
    X0 = np.asarray(X0, dtype=float)
    X1 = np.asarray(X1, dtype=float)
    Y0 = np.asarray(Y0, dtype=float)
    Y1 = np.asarray(Y1, dtype=float)
    th = float(theta)
    Xt = th * X0 + (1.0 - th) * X1
    Yt = th * Y0 + (1.0 - th) * Y1

    r_sq = Xt ** 2 - th * X0 ** 2 - (1.0 - th) * X1 ** 2 \
        + th * (1.0 - th) * (X1 - X0) ** 2

    def xlogx(v):
        return np.where(v > 0, v * np.log(np.where(v > 0, v, 1.0)), 0.0)

    r_ent = xlogx(Xt) - th * xlogx(X0) - (1.0 - th) * xlogx(X1)

    r_ratio = Yt ** 2 / Xt - th * Y0 ** 2 / X0 - (1.0 - th) * Y1 ** 2 / X1 \
        + th * (1.0 - th) * (X1 * Y0 - X0 * Y1) ** 2 / (X0 * X1 * Xt)

    return r_sq, r_ent, r_ratio
