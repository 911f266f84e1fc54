"""Continuous problem description and its sampled (grid-bound) form.

A model collects the ion species (valence, diffusion coefficient,
initial density), the dielectric coefficient, the fixed charge density
and one boundary condition per end of the interval.  Sampling evaluates
every coefficient at the grid points the discrete scheme reads them
from: faces for the dielectric inside the divergence stencil, centers
for everything else.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError
from .mesh import Grid1D

BC_KINDS = ("dirichlet", "neumann", "robin")

CoefficientFn = Callable[[np.ndarray], "np.ndarray | float"]


@dataclass(frozen=True)
class BoundaryEnd:
    """Boundary condition at one end of the interval.

    kind      one of "dirichlet", "neumann", "robin"
    phi_b     boundary data (potential value, flux value, or Robin data)
    beta      Robin coefficient, required positive for kind="robin"
    """

    kind: str
    phi_b: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.kind not in BC_KINDS:
            raise ConfigurationError(
                f"unknown boundary kind {self.kind!r}, expected one of {BC_KINDS}")
        if self.kind == "robin" and not self.beta > 0:
            raise ConfigurationError(
                f"robin boundary requires beta > 0, got beta={self.beta}")

    @property
    def alpha(self) -> float:
        """Coefficient of the potential in the mixed boundary operator."""
        return 0.0 if self.kind == "neumann" else 1.0

    @property
    def beta_eff(self) -> float:
        """Coefficient of the conormal derivative in the boundary operator."""
        if self.kind == "dirichlet":
            return 0.0
        if self.kind == "neumann":
            return 1.0
        return self.beta


@dataclass(frozen=True)
class SpeciesSpec:
    """One ion species: valence, diffusion coefficient, initial density."""

    z: float
    D: CoefficientFn
    rho_in: CoefficientFn


@dataclass(frozen=True)
class PnpModel:
    """Full continuous problem: species, dielectric, fixed charge, BCs."""

    species: tuple[SpeciesSpec, ...]
    epsilon: CoefficientFn
    f: CoefficientFn
    left: BoundaryEnd
    right: BoundaryEnd

    @property
    def num_species(self) -> int:
        return len(self.species)

    @property
    def charges(self) -> np.ndarray:
        return np.array([sp.z for sp in self.species], dtype=float)

    @property
    def pure_neumann(self) -> bool:
        return self.left.kind == "neumann" and self.right.kind == "neumann"


@dataclass(frozen=True)
class SampledModel:
    """Model coefficients evaluated on a particular grid.

    eps_face    dielectric at the N+1 faces
    eps_center  dielectric at the N centers
    f_center    fixed charge at the centers
    D_center    per-species diffusion at the centers, shape (s, N)
    rho0        per-species initial densities at the centers, shape (s, N)
    z           per-species valences, shape (s,)
    """

    eps_face: np.ndarray
    eps_center: np.ndarray
    f_center: np.ndarray
    D_center: np.ndarray
    rho0: np.ndarray
    z: np.ndarray
    left: BoundaryEnd
    right: BoundaryEnd

    @property
    def num_species(self) -> int:
        return self.D_center.shape[0]

    @property
    def pure_neumann(self) -> bool:
        return self.left.kind == "neumann" and self.right.kind == "neumann"


@dataclass
class ValidationReport:
    """Outcome of model/grid validation: ok flag plus issue messages."""

    issues: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def add(self, message: str) -> None:
        self.issues.append(message)


def _eval_on(fn: CoefficientFn, x: np.ndarray) -> np.ndarray:
    out = np.asarray(fn(x), dtype=float)
    return np.broadcast_to(out, x.shape).copy()


def validate(model: PnpModel, grid: Grid1D) -> ValidationReport:
    """Check positivity of coefficients, admissible initial data and,
    for a both-ends-flux problem, the charge compatibility condition."""
    report = ValidationReport()
    if model.num_species < 1:
        report.add("model needs at least one species")
        return report

    eps_face = _eval_on(model.epsilon, grid.faces)
    eps_center = _eval_on(model.epsilon, grid.centers)
    if np.any(eps_face <= 0) or np.any(eps_center <= 0):
        report.add("dielectric coefficient must be positive on the grid")

    for i, sp in enumerate(model.species, start=1):
        D = _eval_on(sp.D, grid.centers)
        if np.any(D <= 0):
            report.add(f"species {i}: diffusion coefficient must be positive")
        rho = _eval_on(sp.rho_in, grid.centers)
        if np.any(rho < 0):
            report.add(f"species {i}: initial density must be nonnegative")

    if model.pure_neumann:
        f_center = _eval_on(model.f, grid.centers)
        rho0 = np.array([_eval_on(sp.rho_in, grid.centers) for sp in model.species])
        charge = grid.h * (f_center.sum() + (model.charges[:, None] * rho0).sum())
        flux = (eps_face[0] * model.left.phi_b + eps_face[-1] * model.right.phi_b)
        scale = 1.0 + grid.h * (np.abs(f_center).sum()
                                + np.abs(model.charges[:, None] * rho0).sum()) \
            + abs(eps_face[0] * model.left.phi_b) \
            + abs(eps_face[-1] * model.right.phi_b)
        if abs(charge + flux) > 1e-10 * scale:
            report.add(
                "flux boundary conditions on both ends require total charge "
                f"to balance the boundary flux (residual {charge + flux:.3e})")
    return report


def sample(model: PnpModel, grid: Grid1D, delta: float | None = None) -> SampledModel:
    """Evaluate all model coefficients on the grid.

    When ``delta`` is given, initial densities are floored at that value
    so the discrete solver starts strictly inside the positive cone.
    Raises ConfigurationError if validation fails.
    """
    report = validate(model, grid)
    if not report.ok:
        raise ConfigurationError("invalid model: " + "; ".join(report.issues))

    rho0 = np.array([_eval_on(sp.rho_in, grid.centers) for sp in model.species])
    if delta is not None:
        rho0 = np.maximum(rho0, float(delta))
    return SampledModel(
        eps_face=_eval_on(model.epsilon, grid.faces),
        eps_center=_eval_on(model.epsilon, grid.centers),
        f_center=_eval_on(model.f, grid.centers),
        D_center=np.array([_eval_on(sp.D, grid.centers) for sp in model.species]),
        rho0=rho0,
        z=model.charges,
        left=model.left,
        right=model.right,
    )
