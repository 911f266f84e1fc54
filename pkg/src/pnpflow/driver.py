"""Time stepping driver, convergence study, and a slow reference solver.

Each time step solves the constrained minimization anchored at the
previous densities, warm-started from (previous densities, zero
momenta, consistent potential).  The constraint matrix and both cached
factorizations (nullspace projector, potential system) are built once
per run and shared by all steps.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .assembly import (ConstraintSystem, State, build_constraint_system,
                       feasible_start, recover_momentum, solve_poisson)
from .errors import ConfigurationError, SolverError
from .functional import ObjectiveParams, eval_gradient, eval_objective
from .mesh import Grid1D, build_grid
from .model import PnpModel, SampledModel, sample
from .newton import NewtonParams, newton_solve
from .optimizer import PgParams, Projector, build_projector, pg_solve

log = logging.getLogger(__name__)

SOLVERS = ("pg", "newton")


@dataclass(frozen=True)
class RunConfig:
    """Time stepping parameters of one run.

    ``solver`` picks the inner minimizer: "pg" (projected gradient, the
    default) or "newton" (reduced Newton, for fine grids where the
    first-order method needs impractically many iterations).  Both solve
    the same step problem and agree to solver tolerance.
    """

    tau: float
    T: float
    snapshot_times: tuple[float, ...] = ()
    pg: PgParams = field(default_factory=PgParams)
    delta_override: float | None = None
    solver: str = "pg"
    newton: NewtonParams = field(default_factory=NewtonParams)

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ConfigurationError(
                f"unknown solver {self.solver!r}; expected one of {SOLVERS}")

    def num_steps(self) -> int:
        n = int(round(self.T / self.tau))
        if n < 1 or abs(n * self.tau - self.T) > 1e-8 * (1.0 + abs(self.T)):
            raise ConfigurationError(
                f"horizon T={self.T} is not a positive multiple of tau={self.tau}")
        return n


def select_delta(h: float, tau: float, rho_in_samples: np.ndarray) -> float:
    """Positivity floor: max(min(h^2, tau), smallest initial sample);
    falls back to min(h^2, tau) when the initial data touch zero."""
    base = min(h * h, tau)
    lowest = float(np.min(rho_in_samples))
    if lowest <= 0.0:
        return base
    return max(base, lowest)


@dataclass
class StepRecord:
    """Per-step diagnostics row."""

    t: float
    energy: float
    kinetic: float
    mass: np.ndarray
    min_rho: float
    pg_iters: int
    pg_status: str
    max_feas_ratio: float = 0.0
    seconds: float = 0.0


@dataclass
class Diagnostics:
    """Diagnostics rows of a whole run, in time order."""

    records: list[StepRecord] = field(default_factory=list)

    def append(self, rec: StepRecord) -> None:
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        if name == "mass":
            return np.array([r.mass for r in self.records])
        if name == "pg_status":
            return np.array([r.pg_status for r in self.records], dtype=object)
        return np.array([getattr(r, name) for r in self.records], dtype=float)


@dataclass
class Snapshot:
    """Fields captured at (the step closest to) one requested time."""

    t_requested: float
    t: float
    rho: np.ndarray
    phi: np.ndarray


@dataclass
class RunResult:
    grid: Grid1D
    delta: float
    diagnostics: Diagnostics
    snapshots: list[Snapshot]
    final: Snapshot
    seconds: float


@dataclass
class StepContext:
    """Objects shared by every step of one run."""

    sm: SampledModel
    grid: Grid1D
    params: ObjectiveParams
    cs0: ConstraintSystem
    projector: Projector | None

    @classmethod
    def prepare(cls, sm: SampledModel, grid: Grid1D, cfg: RunConfig,
                delta: float) -> "StepContext":
        cs0 = build_constraint_system(sm, grid, sm.rho0, delta)
        # the nullspace projector is only needed by the pg solver
        proj = build_projector(cs0) if cfg.solver == "pg" else None
        return cls(sm=sm, grid=grid,
                   params=ObjectiveParams.from_model(sm, grid, cfg.tau),
                   cs0=cs0, projector=proj)


def advance_step(rho_prev: np.ndarray, sm: SampledModel, grid: Grid1D,
                 cfg: RunConfig, context: StepContext | None = None,
                 prev_energy: float | None = None, step: int | None = None,
                 t: float | None = None) -> tuple[State, StepRecord]:
    """Advance the densities by one step of size cfg.tau.

    Checks the structural postconditions (mass, energy dissipation up to
    twice the solver tolerance, positivity) and raises SolverError with
    the step index attached when one fails.
    """
    if context is None:
        delta = cfg.delta_override
        if delta is None:
            delta = select_delta(grid.h, cfg.tau, sm.rho0)
        context = StepContext.prepare(sm, grid, cfg, delta)
    cs = context.cs0.with_rho_prev(rho_prev)

    tic = time.perf_counter()
    objective = lambda st: eval_objective(st, context.params)
    if cfg.solver == "newton":
        if prev_energy is None:
            u0 = feasible_start(sm, grid, rho_prev, cs.delta, poisson=cs.poisson)
            prev_energy = objective(u0).diagnostic_energy
        state, rep = newton_solve(cs, context.params, cfg.newton)
    else:
        u0 = feasible_start(sm, grid, rho_prev, cs.delta, poisson=cs.poisson)
        gradient = lambda st: eval_gradient(st, context.params)
        if prev_energy is None:
            prev_energy = objective(u0).diagnostic_energy
        if context.projector is None:
            context.projector = build_projector(cs)
        state, rep = pg_solve(u0, cs, objective, gradient, cfg.pg,
                              projector=context.projector)
    seconds = time.perf_counter() - tic

    bk = rep.breakdown
    mass = grid.h * state.rho.sum(axis=1)
    mass_prev = grid.h * np.asarray(rho_prev).sum(axis=1)
    if np.any(np.abs(mass - mass_prev) > 1e-8 * (1.0 + np.abs(mass_prev))):
        raise SolverError(
            f"mass drifted by {np.abs(mass - mass_prev).max():.3e}", step=step)
    if bk.total_objective > prev_energy + 2.0 * cfg.pg.tol:
        raise SolverError(
            f"energy increased: {prev_energy} -> {bk.total_objective} "
            f"(+kinetic)", step=step)
    min_rho = float(state.rho.min())
    if not min_rho > 0.0:
        raise SolverError(f"density lost positivity (min {min_rho:.3e})",
                          step=step)

    rec = StepRecord(t=t if t is not None else float("nan"),
                     energy=bk.diagnostic_energy, kinetic=bk.kinetic,
                     mass=mass, min_rho=min_rho, pg_iters=rep.iterations,
                     pg_status=rep.status, max_feas_ratio=rep.max_feas_ratio,
                     seconds=seconds)
    return state, rec


def run(model: PnpModel, grid: Grid1D, cfg: RunConfig,
        step_callback=None) -> RunResult:
    """Run the scheme from t=0 to t=T on the given grid.

    Snapshot times are matched to the nearest completed step.  On solver
    failure the partial result so far is attached to the raised error as
    ``partial_result``.
    """
    sm = sample(model, grid)
    delta = cfg.delta_override
    if delta is None:
        delta = select_delta(grid.h, cfg.tau, sm.rho0)
    if delta <= 0:
        raise ConfigurationError(f"density floor must be positive, got {delta}")
    sm = replace(sm, rho0=np.maximum(sm.rho0, delta))

    n_steps = cfg.num_steps()
    context = StepContext.prepare(sm, grid, cfg, delta)

    snap_steps: dict[int, list[float]] = {}
    for t_req in cfg.snapshot_times:
        k = min(max(int(round(t_req / cfg.tau)), 0), n_steps)
        snap_steps.setdefault(k, []).append(float(t_req))

    tic = time.perf_counter()
    state = feasible_start(sm, grid, sm.rho0, delta, poisson=context.cs0.poisson)
    bk0 = eval_objective(state, context.params)
    diag = Diagnostics()
    rec0 = StepRecord(t=0.0, energy=bk0.diagnostic_energy, kinetic=0.0,
                      mass=grid.h * state.rho.sum(axis=1),
                      min_rho=float(state.rho.min()),
                      pg_iters=0, pg_status="initial")
    diag.append(rec0)
    if step_callback is not None:
        step_callback(rec0)

    snapshots: list[Snapshot] = []

    def capture(k: int, st: State) -> None:
        for t_req in snap_steps.get(k, []):
            snapshots.append(Snapshot(t_requested=t_req, t=k * cfg.tau,
                                      rho=st.rho.copy(), phi=st.phi.copy()))

    capture(0, state)
    prev_energy = bk0.diagnostic_energy
    rho = sm.rho0.copy()

    for n in range(1, n_steps + 1):
        try:
            state, rec = advance_step(rho, sm, grid, cfg, context=context,
                                      prev_energy=prev_energy, step=n,
                                      t=n * cfg.tau)
        except SolverError as exc:
            exc.partial_result = RunResult(
                grid=grid, delta=delta, diagnostics=diag, snapshots=snapshots,
                final=Snapshot(t_requested=(n - 1) * cfg.tau, t=(n - 1) * cfg.tau,
                               rho=rho.copy(),
                               phi=state.phi.copy()),
                seconds=time.perf_counter() - tic)
            raise
        rho = state.rho.copy()
        prev_energy = rec.energy
        diag.append(rec)
        if step_callback is not None:
            step_callback(rec)
        capture(n, state)
        if n % 500 == 0:
            log.info("step %d/%d: energy=%.6e iters=%d",
                     n, n_steps, rec.energy, rec.pg_iters)

    final = Snapshot(t_requested=cfg.T, t=n_steps * cfg.tau,
                     rho=state.rho.copy(), phi=state.phi.copy())
    return RunResult(grid=grid, delta=delta, diagnostics=diag,
                     snapshots=snapshots, final=final,
                     seconds=time.perf_counter() - tic)


@dataclass
class ConvergenceRow:
    """Errors (and orders relative to the previous level) at one resolution."""

    h: float
    tau: float
    errors: dict[str, float]
    orders: dict[str, float | None]
    max_feas_ratio: float = 0.0


def _restrict(values_fine: np.ndarray, centers_fine: np.ndarray,
              centers_coarse: np.ndarray) -> np.ndarray:
    """Piecewise-linear interpolation of a fine-grid center field onto
    coarse centers (fine and coarse centers do not nest)."""
    return np.interp(centers_coarse, centers_fine, values_fine)


def _field_names(s: int) -> list[str]:
    return [f"rho_{i + 1}" for i in range(s)] + ["phi"]


def convergence_study(model: PnpModel, a: float, b: float,
                      base_N: int = 20, levels: int = 4,
                      coupling: str = "tau=h", T_eval: float = 0.5,
                      ref_N: int = 640, ref_tau: float = 1e-4,
                      pg: PgParams | None = None,
                      reference: RunResult | None = None,
                      ref_solver: str = "newton",
                      level_solver: str = "pg"
                      ) -> list[ConvergenceRow]:
    """Self-convergence errors against a fine reference solution at T_eval.

    ``coupling`` picks tau = h or tau = h^2 per level.  The reference is
    computed with (ref_N, ref_tau) unless a precomputed reference run is
    supplied; its grid must refine every level's grid.  The reference
    defaults to the reduced Newton solver: at that resolution the
    projected gradient method would need millions of iterations per
    step, and both solvers minimize the same objective.
    """
    if levels < 2:
        raise ConfigurationError("convergence study needs at least two levels")
    if coupling not in ("tau=h", "tau=h2"):
        raise ConfigurationError(f"unknown coupling {coupling!r}")
    pg = pg if pg is not None else PgParams()

    level_Ns = [base_N * 2 ** l for l in range(levels)]
    if reference is not None:
        ref_grid = reference.grid
    else:
        ref_grid = build_grid(a, b, ref_N)
    for N in level_Ns:
        if ref_grid.N % N != 0 or ref_grid.N <= max(level_Ns):
            raise ConfigurationError(
                f"reference grid N={ref_grid.N} does not refine level N={N}")

    if reference is None:
        log.info("computing reference solution: N=%d tau=%g solver=%s",
                 ref_N, ref_tau, ref_solver)
        reference = run(model, ref_grid,
                        RunConfig(tau=ref_tau, T=T_eval, pg=pg,
                                  solver=ref_solver))

    s = reference.final.rho.shape[0]
    names = _field_names(s)
    ref_fields = {f"rho_{i + 1}": reference.final.rho[i] for i in range(s)}
    ref_fields["phi"] = reference.final.phi[1:-1]

    rows: list[ConvergenceRow] = []
    prev_errors: dict[str, float] | None = None
    for N in level_Ns:
        grid = build_grid(a, b, N)
        tau = grid.h if coupling == "tau=h" else grid.h ** 2
        result = run(model, grid, RunConfig(tau=tau, T=T_eval, pg=pg,
                                            solver=level_solver))
        fields = {f"rho_{i + 1}": result.final.rho[i] for i in range(s)}
        fields["phi"] = result.final.phi[1:-1]

        errors = {}
        for name in names:
            restricted = _restrict(ref_fields[name], ref_grid.centers,
                                   grid.centers)
            diff = fields[name] - restricted
            errors[name] = float(np.sqrt(grid.h * np.sum(diff ** 2)))
        orders = {name: (None if prev_errors is None
                         else float(np.log2(prev_errors[name] / errors[name])))
                  for name in names}
        rows.append(ConvergenceRow(
            h=grid.h, tau=tau, errors=errors, orders=orders,
            max_feas_ratio=float(result.diagnostics.column(
                "max_feas_ratio").max())))
        prev_errors = errors
        log.info("level N=%d done: %s", N,
                 {k: f"{v:.3e}" for k, v in errors.items()})
    return rows


def _fd_gradient(fw, w: np.ndarray, f_w: float, rel_step: float = 8e-6
                 ) -> np.ndarray:
    g = np.empty_like(w)
    for k in range(w.size):
        hk = rel_step * (1.0 + abs(w[k]))
        for _ in range(60):
            wp, wm = w.copy(), w.copy()
            wp[k] += hk
            wm[k] -= hk
            fp, fm = fw(wp), fw(wm)
            if np.isfinite(fp) and np.isfinite(fm):
                break
            hk *= 0.5
        else:
            raise SolverError("finite difference stencil left the feasible set")
        g[k] = (fp - fm) / (2.0 * hk)
    return g


def _fd_hessian(fw, w: np.ndarray, rel_step: float = 2e-5) -> np.ndarray:
    n = w.size
    H = np.empty((n, n))
    hs = rel_step * (1.0 + np.abs(w))
    f0 = fw(w)
    for k in range(n):
        for l in range(k, n):
            ek = np.zeros(n)
            el = np.zeros(n)
            ek[k] = hs[k]
            el[l] = hs[l]
            if k == l:
                val = (fw(w + ek) - 2.0 * f0 + fw(w - ek)) / hs[k] ** 2
            else:
                val = (fw(w + ek + el) - fw(w + ek - el)
                       - fw(w - ek + el) + fw(w - ek - el)) \
                    / (4.0 * hs[k] * hs[l])
            H[k, l] = H[l, k] = val
    return H


def reference_minimizer(cs: ConstraintSystem, p: ObjectiveParams,
                        grid: Grid1D, tol: float = 1e-10,
                        max_iter: int = 200) -> State:
    """Solve the step problem by damped Newton on the reduced unknowns.

    The densities are parametrized on the per-species zero-mass slice;
    momenta and potential are recovered from the constraints, so the
    problem becomes unconstrained apart from positivity (kept by a
    fraction-to-boundary step limit).  Derivatives are finite
    differences of the objective; the production gradient is never used.
    Intended as a cross-check on small problems only.
    """
    layout = cs.layout
    s, N = layout.s, layout.N
    if s * N > 40:
        raise ValueError("reference_minimizer is for small instances only")
    rho_n = cs.rho_prev

    def build_state(w: np.ndarray) -> State | None:
        dw = w.reshape(s, N - 1)
        # zero-mass density basis: drho_j = w_j - w_{j-1} with zero padding
        drho = np.diff(dw, axis=1, prepend=0.0, append=0.0)
        rho = rho_n + drho
        if np.any(rho <= 0):
            return None
        m = recover_momentum(rho, rho_n, grid)
        phi = solve_poisson(cs.poisson, rho)
        u = np.empty(layout.dim)
        st = State(u=u, layout=layout)
        st.rho[:] = rho
        st.m[:] = m
        st.phi[:] = phi
        return st

    def fw(w: np.ndarray) -> float:
        st = build_state(w)
        if st is None:
            return np.inf
        return eval_objective(st, p).total_objective

    w = np.zeros(s * (N - 1))
    f_w = fw(w)
    for _ in range(max_iter):
        g = _fd_gradient(fw, w, f_w)
        if np.linalg.norm(g, np.inf) <= tol * (1.0 + abs(f_w)):
            break
        H = _fd_hessian(fw, w)
        d = -g
        lam = 0.0
        for _ in range(40):
            try:
                cand = np.linalg.solve(H + lam * np.eye(w.size), -g)
            except np.linalg.LinAlgError:
                cand = None
            if cand is not None and g @ cand < 0:
                d = cand
                break
            lam = max(10.0 * lam, 1e-10 * (1.0 + abs(np.trace(H)) / w.size))
        # fraction-to-boundary cap, then backtrack on the objective
        # (infeasible trials still return inf as a safety net)
        dw = d.reshape(s, N - 1)
        drho_d = np.diff(dw, axis=1, prepend=0.0, append=0.0)
        rho_cur = rho_n + np.diff(w.reshape(s, N - 1), axis=1,
                                  prepend=0.0, append=0.0)
        neg = drho_d < 0.0
        eta = 1.0
        if np.any(neg):
            eta = min(1.0, 0.995 * float(np.min(rho_cur[neg] / -drho_d[neg])))
        accepted = False
        for _ in range(80):
            f_trial = fw(w + eta * d)
            if np.isfinite(f_trial) and f_trial <= f_w + 1e-4 * eta * (g @ d):
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            break
        step = eta * d
        w = w + step
        f_w = f_trial
        if np.linalg.norm(step) <= 1e-14 * (1.0 + np.linalg.norm(w)):
            break

    st = build_state(w)
    if st is None:
        raise SolverError("reference minimizer left the feasible set")
    return st
