"""Discrete state layout and the per-step linear constraint system.

One time step's unknown stacks, in this order: all cell densities
(species-major), all interior-face momenta, and the potential including
its two ghost values.  The equality constraints are the per-cell
transport balance against the previous densities and a ghost-point
finite difference discretization of the potential equation, one row per
potential unknown.

For a both-ends-flux (pure Neumann) problem the potential rows are
rank-deficient: the last interior row is a linear combination of the
remaining rows and the transport rows whenever the charge/flux data are
compatible.  That row is replaced by a zero-mean gauge row, which
restores full row rank without changing the solution set.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import MassMismatchError, SingularSystemError
from .mesh import Grid1D
from .model import SampledModel


@dataclass(frozen=True)
class StateLayout:
    """Index map for the flat step unknown (densities, momenta, potential)."""

    s: int
    N: int

    @property
    def dim(self) -> int:
        return self.s * (2 * self.N - 1) + self.N + 2

    @property
    def rho_slice(self) -> slice:
        return slice(0, self.s * self.N)

    @property
    def m_slice(self) -> slice:
        start = self.s * self.N
        return slice(start, start + self.s * (self.N - 1))

    @property
    def phi_slice(self) -> slice:
        return slice(self.s * (2 * self.N - 1), self.dim)

    def rho_index(self, i: int, j: int) -> int:
        """Flat index of the density of species i (0-based) in cell j (0-based)."""
        return i * self.N + j

    def m_index(self, i: int, j: int) -> int:
        """Flat index of the momentum of species i at interior face j
        (0-based; face j sits between cells j and j+1)."""
        return self.s * self.N + i * (self.N - 1) + j

    def phi_index(self, l: int) -> int:
        """Flat index of potential entry l = 0..N+1 (0 and N+1 are ghosts)."""
        return self.s * (2 * self.N - 1) + l


@dataclass
class State:
    """Flat step unknown plus its layout; rho/m/phi expose live views."""

    u: np.ndarray
    layout: StateLayout

    @property
    def rho(self) -> np.ndarray:
        lo = self.layout
        return self.u[lo.rho_slice].reshape(lo.s, lo.N)

    @property
    def m(self) -> np.ndarray:
        lo = self.layout
        return self.u[lo.m_slice].reshape(lo.s, lo.N - 1)

    @property
    def phi(self) -> np.ndarray:
        return self.u[self.layout.phi_slice]

    def copy(self) -> "State":
        return State(u=self.u.copy(), layout=self.layout)


def _ghost_row_coeffs(end, eps_wall: float, h: float) -> tuple[float, float, float]:
    """Coefficients (on the ghost value, on the first interior value) and
    right-hand side of one ghost boundary row."""
    alpha, beta = end.alpha, end.beta_eff
    return (alpha * h + 2.0 * beta * eps_wall,
            alpha * h - 2.0 * beta * eps_wall,
            2.0 * h * end.phi_b)


@dataclass
class PoissonBlock:
    """Potential rows of the constraint system.

    ``phi_mat`` holds the rows actually enforced (gauge-replaced in the
    pure Neumann case); ``phi_mat_full`` always holds the plain stencil
    rows so residuals of the replaced row can still be checked.  The row
    for interior cell j also couples to every density in that cell with
    coefficient -z_i; the gauge row couples to nothing.
    """

    phi_mat: sp.csr_matrix
    phi_mat_full: sp.csr_matrix
    rhs: np.ndarray
    rhs_full: np.ndarray
    z: np.ndarray
    h: float
    pure_neumann: bool
    gauge_row: int | None
    _lu: object = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return self.phi_mat.shape[0] - 2

    def charge_rhs(self, rho: np.ndarray) -> np.ndarray:
        """Right-hand side with the density coupling moved over, so the
        system becomes square in the potential alone."""
        out = self.rhs.copy()
        out[1:self.N + 1] += self.z @ rho
        if self.gauge_row is not None:
            out[self.gauge_row] = self.rhs[self.gauge_row]
        return out

    def factorization(self):
        if self._lu is None:
            try:
                self._lu = splu(self.phi_mat.tocsc())
            except RuntimeError as exc:
                raise SingularSystemError(
                    f"potential system factorization failed: {exc}") from exc
        return self._lu


def assemble_poisson_rows(sm: SampledModel, grid: Grid1D) -> PoissonBlock:
    """Ghost-point discretization of the potential equation.

    Interior row for cell j:
        (-eps_{j-1/2} phi_{j-1} + (eps_{j-1/2}+eps_{j+1/2}) phi_j
         - eps_{j+1/2} phi_{j+1}) / h^2 - sum_i z_i rho_{ij} = f_j
    Ghost rows encode alpha*phi + beta*eps*(outward normal derivative)
    = phi_b via the two-point midpoint/difference closure, scaled by 2h.
    """
    N, h = grid.N, grid.h
    eps = sm.eps_face
    rows, cols, vals = [], [], []
    rhs = np.zeros(N + 2)

    c_ghost, c_in, r = _ghost_row_coeffs(sm.left, eps[0], h)
    rows += [0, 0]
    cols += [0, 1]
    vals += [c_ghost, c_in]
    rhs[0] = r

    for j in range(1, N + 1):
        el, er = eps[j - 1], eps[j]
        rows += [j, j, j]
        cols += [j - 1, j, j + 1]
        vals += [-el / h**2, (el + er) / h**2, -er / h**2]
        rhs[j] = sm.f_center[j - 1]

    c_ghost, c_in, r = _ghost_row_coeffs(sm.right, eps[-1], h)
    rows += [N + 1, N + 1]
    cols += [N + 1, N]
    vals += [c_ghost, c_in]
    rhs[N + 1] = r

    full = sp.csr_matrix((vals, (rows, cols)), shape=(N + 2, N + 2))
    rhs_full = rhs.copy()

    gauge_row = None
    mat = full
    if sm.pure_neumann:
        # Replace the last interior row (a dependent row under the charge
        # compatibility condition) with the gauge h * sum_j phi_j = 0.
        gauge_row = N
        lil = full.tolil()
        lil.rows[N], lil.data[N] = [], []
        lil[N, 1:N + 1] = h
        mat = lil.tocsr()
        rhs[N] = 0.0

    return PoissonBlock(phi_mat=mat, phi_mat_full=full, rhs=rhs,
                        rhs_full=rhs_full, z=sm.z.copy(), h=h,
                        pure_neumann=sm.pure_neumann, gauge_row=gauge_row)


def solve_poisson(block: PoissonBlock, rho: np.ndarray) -> np.ndarray:
    """Solve the potential system for given densities.

    Returns the N+2 potential values including ghosts.  Raises
    SingularSystemError when the factorization fails, when the solve
    residual is not at rounding level, or when flux data are
    incompatible with the total charge (pure Neumann case, checked on
    the gauge-replaced row).
    """
    rhs = block.charge_rhs(np.asarray(rho, dtype=float))
    phi = block.factorization().solve(rhs)

    resid = np.abs(block.phi_mat @ phi - rhs)
    scale = np.abs(block.phi_mat) @ np.abs(phi) + np.abs(rhs) + 1e-300
    if np.any(resid > 1e-12 * scale + 1e-14):
        raise SingularSystemError(
            f"potential solve residual too large: {resid.max():.3e}")

    if block.gauge_row is not None:
        # The replaced stencil row must hold automatically; if it does not,
        # the flux data are incompatible with the total charge.
        j = block.gauge_row
        row = block.phi_mat_full.getrow(j).toarray().ravel()
        full_rhs = float(block.rhs_full[j] + block.z @ rho[:, j - 1])
        row_resid = abs(float(row @ phi) - full_rhs)
        row_scale = float(np.abs(row) @ np.abs(phi)) + abs(full_rhs) + 1.0
        if row_resid > 1e-10 * row_scale:
            raise SingularSystemError(
                "flux boundary data incompatible with the total charge "
                f"(replaced-row residual {float(row_resid):.3e})")
    return phi


def assemble_transport_rows(grid: Grid1D, rho_prev: np.ndarray
                            ) -> tuple[sp.csr_matrix, np.ndarray]:
    """Per-cell transport balance rows over (densities, momenta) columns.

    Row (i, j):  rho_{ij} + (m_{i,j+1/2} - m_{i,j-1/2}) / h = rho_prev_{ij},
    with zero momenta at the two boundary faces left implicit.
    """
    s, N = rho_prev.shape
    h = grid.h
    layout = StateLayout(s=s, N=N)
    rows, cols, vals = [], [], []
    for i in range(s):
        for j in range(N):
            r = i * N + j
            rows.append(r)
            cols.append(layout.rho_index(i, j))
            vals.append(1.0)
            if j < N - 1:
                rows.append(r)
                cols.append(layout.m_index(i, j))
                vals.append(1.0 / h)
            if j > 0:
                rows.append(r)
                cols.append(layout.m_index(i, j - 1))
                vals.append(-1.0 / h)
    mat = sp.csr_matrix((vals, (rows, cols)),
                        shape=(s * N, s * N + s * (N - 1)))
    return mat, rho_prev.ravel().copy()


@dataclass(frozen=True)
class ConstraintSystem:
    """Stacked equality constraints A u = b of one time step.

    Rows 0..s*N-1 are the transport balances (species-major); the next
    N+2 rows are the potential system.  A is independent of the
    previous densities, so it (and any factorization derived from it)
    can be shared across steps; only the transport part of b changes.
    """

    A: sp.csr_matrix
    b: np.ndarray
    layout: StateLayout
    delta: float
    rho_prev: np.ndarray
    poisson: PoissonBlock

    @property
    def transport_rows(self) -> slice:
        return slice(0, self.layout.s * self.layout.N)

    @property
    def poisson_rows(self) -> slice:
        n = self.layout.s * self.layout.N
        return slice(n, n + self.layout.N + 2)

    def with_rho_prev(self, rho_prev: np.ndarray) -> "ConstraintSystem":
        """Same constraint matrix anchored at new previous densities."""
        rho_prev = np.asarray(rho_prev, dtype=float)
        if rho_prev.shape != self.rho_prev.shape:
            raise ValueError("rho_prev shape mismatch")
        b = self.b.copy()
        b[self.transport_rows] = rho_prev.ravel()
        return replace(self, b=b, rho_prev=rho_prev.copy())

    def feasibility(self, u: np.ndarray) -> float:
        return float(np.linalg.norm(self.A @ u - self.b))


def build_constraint_system(sm: SampledModel, grid: Grid1D,
                            rho_prev: np.ndarray, delta: float
                            ) -> ConstraintSystem:
    """Assemble the full constraint system for one step."""
    rho_prev = np.asarray(rho_prev, dtype=float)
    s, N = rho_prev.shape
    if s != sm.num_species or N != grid.N:
        raise ValueError("rho_prev shape does not match model/grid")
    layout = StateLayout(s=s, N=N)

    tmat, trhs = assemble_transport_rows(grid, rho_prev)
    block = assemble_poisson_rows(sm, grid)

    # Embed both blocks in the full column space.
    t_full = sp.hstack(
        [tmat, sp.csr_matrix((s * N, N + 2))], format="csr")
    pm = block.phi_mat.tocoo()
    rows = list(pm.row)
    cols = [layout.phi_index(c) for c in pm.col]
    vals = list(pm.data)
    for j in range(1, N + 1):
        if j == block.gauge_row:
            continue
        for i in range(s):
            rows.append(j)
            cols.append(layout.rho_index(i, j - 1))
            vals.append(-sm.z[i])
    p_full = sp.csr_matrix((vals, (rows, cols)), shape=(N + 2, layout.dim))

    A = sp.vstack([t_full, p_full], format="csr")
    b = np.concatenate([trhs, block.rhs])
    return ConstraintSystem(A=A, b=b, layout=layout, delta=float(delta),
                            rho_prev=rho_prev.copy(), poisson=block)


def recover_momentum(rho: np.ndarray, rho_prev: np.ndarray,
                     grid: Grid1D) -> np.ndarray:
    """Interior-face momenta implied by the transport balance.

    m_{i,j+1/2} = -h * sum_{l<=j} (rho_{il} - rho_prev_{il}); requires each
    species' mass unchanged, else the implicit zero flux at the right
    wall is violated.
    """
    rho = np.asarray(rho, dtype=float)
    rho_prev = np.asarray(rho_prev, dtype=float)
    d = rho - rho_prev
    mass_resid = grid.h * d.sum(axis=1)
    scale = 1.0 + grid.h * (np.abs(rho).sum(axis=1) + np.abs(rho_prev).sum(axis=1))
    bad = np.abs(mass_resid) > 1e-10 * scale
    if np.any(bad):
        i = int(np.argmax(np.abs(mass_resid)))
        raise MassMismatchError(
            f"species {i + 1}: mass changed by {mass_resid[i]:.3e}, "
            "cannot recover zero-flux momenta")
    return -grid.h * np.cumsum(d, axis=1)[:, :-1]


def feasible_start(sm: SampledModel, grid: Grid1D, rho_prev: np.ndarray,
                   delta: float, poisson: PoissonBlock | None = None) -> State:
    """Warm-start state: previous densities, zero momenta, consistent potential."""
    rho_prev = np.asarray(rho_prev, dtype=float)
    if np.any(rho_prev <= 0):
        raise ValueError("feasible_start needs strictly positive densities")
    if poisson is None:
        poisson = assemble_poisson_rows(sm, grid)
    layout = StateLayout(s=rho_prev.shape[0], N=grid.N)
    u = np.zeros(layout.dim)
    state = State(u=u, layout=layout)
    state.rho[:] = rho_prev
    state.phi[:] = solve_poisson(poisson, rho_prev)
    return state
