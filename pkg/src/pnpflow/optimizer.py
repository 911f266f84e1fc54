"""Projected gradient method for the constrained step problem.

Equality constraints are removed by orthogonal projection onto the
nullspace of the constraint matrix; density positivity is kept by the
objective's +inf barrier inside a backtracking Armijo line search.  The
projector factorizes the (row-equilibrated) Gram matrix A A^T once and
is reused across all steps of a run, since A never changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .assembly import ConstraintSystem, State
from .errors import SingularSystemError, SolverError

STATUS_CONVERGED = "converged"
STATUS_MAX_ITER = "max-iterations"
STATUS_STALLED = "stalled"


@dataclass(frozen=True)
class PgParams:
    """Projected gradient tuning knobs (defaults are the standard choice)."""

    tol: float = 1e-6
    iter_max: int = 5000
    armijo_c: float = 1e-4
    shrink: float = 0.5
    eta0: float = 1.0
    max_backtracks: int = 60
    enforce_clamp: bool = False


class Projector:
    """Orthogonal projector onto the nullspace of a constraint matrix.

    Rows are equilibrated to unit norm before forming the Gram matrix
    (this changes neither the nullspace nor the projector, only the
    conditioning), and every Gram solve does one step of iterative
    refinement.
    """

    def __init__(self, A: sp.csr_matrix):
        row_norms = np.sqrt(np.asarray(A.multiply(A).sum(axis=1)).ravel())
        if np.any(row_norms == 0.0):
            raise SingularSystemError("constraint matrix has a zero row")
        self._row_scale = 1.0 / row_norms
        self._As = sp.diags(self._row_scale) @ A
        self._As = self._As.tocsr()
        self._AsT = self._As.T.tocsr()
        gram = (self._As @ self._AsT).tocsc()
        try:
            self._lu = splu(gram)
        except RuntimeError as exc:
            raise SingularSystemError(
                f"constraint Gram factorization failed (rank-deficient "
                f"constraints?): {exc}") from exc
        self._gram = gram

    def _gram_solve(self, w: np.ndarray) -> np.ndarray:
        y = self._lu.solve(w)
        y += self._lu.solve(w - self._gram @ y)
        return y

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Project v onto the nullspace of A."""
        w = v - self._AsT @ self._gram_solve(self._As @ v)
        # second pass: when ||Pv|| << ||v|| the subtraction leaves a
        # row-space residue of order eps*||v|| that would flip the sign
        # of directional derivatives; twice is enough, as with
        # Gram-Schmidt reorthogonalization
        return w - self._AsT @ self._gram_solve(self._As @ w)

    def restore(self, u: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Minimum-norm correction of u onto the affine set A u = b."""
        r = self._As @ u - self._row_scale * b
        y = self._gram_solve(r)
        return u - self._AsT @ y


def build_projector(cs: ConstraintSystem) -> Projector:
    return Projector(cs.A)


def project_step_direction(projector: Projector, grad: np.ndarray) -> np.ndarray:
    """Feasible descent direction: negative projected gradient."""
    return -projector.apply(grad)


def line_search(state: State, du: np.ndarray, objective, params: PgParams,
                f0: float | None = None, slope: float | None = None) -> float:
    """Backtracking Armijo step along du, rejecting steps that leave the
    positive density cone.  Returns 0.0 when no acceptable step exists
    within the backtracking budget."""
    if f0 is None:
        f0 = objective(state).total_objective
    if slope is None:
        raise ValueError("line_search needs the directional derivative")
    if slope >= 0.0:
        return 0.0

    lo = state.layout
    rho0 = state.u[lo.rho_slice]
    du_rho = du[lo.rho_slice]
    eta = params.eta0
    for _ in range(params.max_backtracks + 1):
        if np.all(rho0 + eta * du_rho > 0.0):
            trial = State(u=state.u + eta * du, layout=lo)
            f_trial = objective(trial).total_objective
            if f_trial <= f0 + params.armijo_c * eta * slope:
                return eta
        eta *= params.shrink
    return 0.0


@dataclass
class PgReport:
    """Outcome of one projected gradient solve."""

    iterations: int
    status: str
    objective: float
    breakdown: object
    final_feasibility: float
    final_step_norm: float
    max_feas_ratio: float
    min_rho: float
    clamp_hits: int = 0
    reprojections: int = 0


def pg_solve(u0: State, cs: ConstraintSystem, objective, gradient,
             params: PgParams, projector: Projector | None = None
             ) -> tuple[State, PgReport]:
    """Minimize the objective over {A u = b, rho > 0} from a feasible start.

    ``objective`` maps a State to an EnergyBreakdown, ``gradient`` to a
    flat array.  Stops when ||A u - b|| + ||eta du|| drops below
    params.tol, the iteration budget runs out, or the line search
    cannot move (stalled).
    """
    pr = projector if projector is not None else build_projector(cs)
    u = u0.copy()
    b = cs.b
    b_scale = 1.0 + float(np.linalg.norm(b))
    restore_at = 1e-10 * b_scale

    feas = cs.feasibility(u.u)
    reprojections = 0
    if feas > restore_at:
        u.u[:] = pr.restore(u.u, b)
        reprojections += 1
        feas = cs.feasibility(u.u)
        if feas > 1e-8 * b_scale:
            raise SolverError(
                f"start point infeasible even after projection ({feas:.3e})")

    bk = objective(u)
    if not bk.finite:
        raise SolverError("objective not finite at the start point")
    f_u = bk.total_objective

    max_feas_ratio = feas / b_scale
    min_rho = float(u.rho.min())
    clamp_hits = 0
    iterations = 0
    step_norm = np.inf
    status = STATUS_MAX_ITER

    for _ in range(params.iter_max):
        g = gradient(u)
        if not np.all(np.isfinite(g)):
            raise SolverError("gradient not finite at an accepted iterate")
        d = project_step_direction(pr, g)
        dn = float(np.linalg.norm(d))
        if dn == 0.0:
            status = STATUS_CONVERGED
            step_norm = 0.0
            break

        slope = float(g @ d)
        eta = line_search(u, d, objective, params, f0=f_u, slope=slope)
        if eta == 0.0:
            status = STATUS_STALLED
            step_norm = 0.0
            break

        u.u += eta * d
        iterations += 1

        if params.enforce_clamp:
            rho = u.rho
            low = rho < cs.delta
            if np.any(low):
                rho[low] = cs.delta
                clamp_hits += int(low.sum())

        bk = objective(u)
        f_new = bk.total_objective
        if f_new > f_u + 1e-8 * (1.0 + abs(f_u)):
            raise SolverError(
                f"objective increased on an accepted step ({f_u} -> {f_new})")
        f_u = f_new

        feas = cs.feasibility(u.u)
        if feas > restore_at and not params.enforce_clamp:
            restored = pr.restore(u.u, b)
            if np.all(restored[u.layout.rho_slice] > 0.0):
                u.u[:] = restored
                reprojections += 1
                feas = cs.feasibility(u.u)
                bk = objective(u)
                f_u = bk.total_objective

        max_feas_ratio = max(max_feas_ratio, feas / b_scale)
        min_rho = min(min_rho, float(u.rho.min()))
        step_norm = eta * dn
        if feas + step_norm <= params.tol:
            status = STATUS_CONVERGED
            break

    if not params.enforce_clamp and feas > 1e-8 * b_scale:
        raise SolverError(f"iterate lost feasibility ({feas:.3e})")

    report = PgReport(iterations=iterations, status=status,
                      objective=f_u, breakdown=bk,
                      final_feasibility=feas, final_step_norm=step_norm,
                      max_feas_ratio=max_feas_ratio, min_rho=min_rho,
                      clamp_hits=clamp_hits, reprojections=reprojections)
    return u, report
