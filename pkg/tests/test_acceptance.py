"""Acceptance suite: every structural guarantee of the scheme at its
production resolution, one test per guarantee.

The expensive artifacts (fine reference run, convergence tables, the two
long example runs) are session fixtures shared across tests.  Each test
prints one summary line with the measured numbers.
"""

import numpy as np
import pytest

from pnpflow import (BoundaryEnd, ObjectiveParams, PgParams, PnpModel,
                     RunConfig, SpeciesSpec, State, StateLayout,
                     build_constraint_system, build_grid, build_projector,
                     eval_gradient, eval_objective, feasible_start,
                     newton_solve, pg_solve, recover_momentum,
                     reference_minimizer, run, sample,
                     interp_identity_residuals)
from pnpflow.assembly import solve_poisson
from pnpflow.cli import parse_config
from pnpflow.driver import convergence_study


def _report(name: str, detail: str) -> None:
    print(f"[ACCEPTANCE] {name}: PASS ({detail})")


# ------------------------------------------------------------------ fixtures

@pytest.fixture(scope="session")
def model51():
    return parse_config("example51")


@pytest.fixture(scope="session")
def reference51(model51):
    grid = build_grid(-1.0, 1.0, 640)
    return run(model51.model, grid, RunConfig(tau=1e-4, T=0.5, solver="newton"))


@pytest.fixture(scope="session")
def table1(model51, reference51):
    return convergence_study(model51.model, -1.0, 1.0, base_N=20, levels=4,
                             coupling="tau=h", T_eval=0.5,
                             reference=reference51, level_solver="pg")


@pytest.fixture(scope="session")
def table2(model51, reference51):
    return convergence_study(model51.model, -1.0, 1.0, base_N=20, levels=4,
                             coupling="tau=h2", T_eval=0.5,
                             reference=reference51, level_solver="newton")


@pytest.fixture(scope="session")
def res52():
    cfg = parse_config("example52")
    assert cfg.run_cfg.pg.enforce_clamp is False
    return run(cfg.model, cfg.grid, cfg.run_cfg)


@pytest.fixture(scope="session")
def res53():
    cfg = parse_config("example53")
    assert cfg.run_cfg.pg.enforce_clamp is False
    return run(cfg.model, cfg.grid, cfg.run_cfg)


# ---------------------------------------------------------------- convergence

def _observed_order(rows, name):
    # least-squares slope of log2(error) against log2(h) over all levels
    hs = np.log2([row.h for row in rows])
    es = np.log2([row.errors[name] for row in rows])
    return float(np.polyfit(hs, es, 1)[0])


def _order_detail(rows, name):
    pairwise = "/".join(f"{row.orders[name]:.2f}" for row in rows[1:])
    return f"{name} {_observed_order(rows, name):.3f} (pairwise {pairwise})"


def test_temporal_convergence_orders(table1):
    for name in ("rho_1", "rho_2"):
        order = _observed_order(table1, name)
        assert 0.8 <= order <= 1.35, (name, order)
    order = _observed_order(table1, "phi")
    assert 0.6 <= order <= 1.2, ("phi", order)
    _report("temporal convergence (tau=h)",
            "; ".join(_order_detail(table1, n)
                      for n in ("rho_1", "rho_2", "phi")))


def test_spatial_convergence_orders(table2):
    for name in ("rho_1", "rho_2", "phi"):
        order = _observed_order(table2, name)
        assert 1.8 <= order <= 2.35, (name, order)
    _report("spatial convergence (tau=h^2)",
            "; ".join(_order_detail(table2, n)
                      for n in ("rho_1", "rho_2", "phi")))


# ------------------------------------------------- structure of the evolution

def test_energy_dissipation(res52):
    energy = res52.diagnostics.column("energy")
    kinetic = res52.diagnostics.column("kinetic")
    assert len(energy) == 201
    combined = energy[1:] + kinetic[1:] - energy[:-1]
    plain = np.diff(energy)
    assert np.all(combined <= 2e-6), combined.max()
    assert np.all(plain <= 2e-6), plain.max()
    _report("energy dissipation",
            f"max (E+K) increment {combined.max():.3e}, "
            f"max E increment {plain.max():.3e} over 200 steps")


def test_mass_conservation(res52, res53):
    worst = 0.0
    for res in (res52, res53):
        mass = res.diagnostics.column("mass")
        worst = max(worst, float(np.max(np.abs(mass - mass[0]))))
    assert worst <= 1e-8
    _report("mass conservation", f"max drift {worst:.3e} over both runs")


def test_positivity_propagation(res53):
    min_rho = res53.diagnostics.column("min_rho")
    assert len(min_rho) == 201
    assert np.all(min_rho > 0.0)
    _report("positivity propagation",
            f"min density over run {min_rho.min():.6e} without clamping")


def test_steady_state_insensitivity(res52, res53):
    h = res52.grid.h
    dist = np.sqrt(h * np.sum((res52.final.rho - res53.final.rho) ** 2,
                              axis=1))
    assert np.all(dist <= 1e-2), dist
    _report("steady state insensitivity",
            "L2 distances at T=2: "
            + ", ".join(f"{d:.3e}" for d in dist))


# --------------------------------------------------------- gradient & oracle

def _random_gradient_instance(rng):
    s = int(rng.integers(1, 4))
    N = int(rng.integers(2, 17))
    grid = build_grid(-1.0, 1.0, N)
    kinds = ["dirichlet", "robin", "neumann"]
    from pnpflow.functional import BoundaryTerm
    ends = []
    for _ in range(2):
        kind = kinds[rng.integers(0, 3)]
        ends.append(BoundaryTerm(
            kind=kind,
            beta=float(rng.uniform(0.3, 2.0)) if kind == "robin" else 0.0,
            eps_phib=float(rng.uniform(-1.0, 1.0)) if kind == "dirichlet"
            else 0.0))
    p = ObjectiveParams(tau=float(rng.uniform(0.05, 1.0)), h=grid.h,
                        D_center=rng.uniform(0.5, 2.0, (s, N)),
                        eps_center=rng.uniform(0.5, 2.0, N),
                        left=ends[0], right=ends[1])
    layout = StateLayout(s=s, N=N)
    st = State(u=np.empty(layout.dim), layout=layout)
    st.rho[:] = rng.uniform(0.4, 2.0, (s, N))
    st.m[:] = 0.3 * rng.standard_normal((s, N - 1))
    st.phi[:] = rng.standard_normal(N + 2)
    return st, p


def test_gradient_correctness():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(100):
        st, p = _random_gradient_instance(rng)
        g = eval_gradient(st, p)
        u0 = st.u.copy()
        g_fd = np.empty_like(u0)
        for k in range(u0.size):
            step = 1e-6 * (1.0 + abs(u0[k]))
            up, um = u0.copy(), u0.copy()
            up[k] += step
            um[k] -= step
            fp = eval_objective(State(u=up, layout=st.layout),
                                p).total_objective
            fm = eval_objective(State(u=um, layout=st.layout),
                                p).total_objective
            g_fd[k] = (fp - fm) / (2.0 * step)
        rel = float(np.linalg.norm(g - g_fd)
                    / max(np.linalg.norm(g_fd), 1e-10))
        worst = max(worst, rel)
        assert rel <= 1e-6
    _report("gradient correctness",
            f"worst relative error {worst:.3e} on 100 states")


def _oracle_instance(s, N, seed):
    """Gently perturbed near-uniform densities: the step problem is well
    scaled, so absolute first-order residuals are resolvable in doubles."""
    r = np.random.default_rng(seed)
    a1, b1 = r.uniform(-0.05, 0.05, 2)
    a2, b2 = r.uniform(-0.05, 0.05, 2)
    if s == 1:
        species = [SpeciesSpec(
            z=0.05, D=lambda x: 1.0 + 0.0 * x,
            rho_in=lambda x: 1.0 + a1 * np.sin(2 * x) + b1 * x)]
    else:
        species = [
            SpeciesSpec(z=1.0, D=lambda x: 1.0 + 0.0 * x,
                        rho_in=lambda x: 1.0 + a1 * np.sin(2 * x) + b1 * x),
            SpeciesSpec(z=-1.0, D=lambda x: 1.0 + 0.0 * x,
                        rho_in=lambda x: 1.0 + a2 * np.cos(x) + b2 * x)]
    model = PnpModel(species=species, epsilon=lambda x: 1.0 + 0.0 * x,
                     f=lambda x: 0.0 * x,
                     left=BoundaryEnd(kind="robin", beta=1.0),
                     right=BoundaryEnd(kind="robin", beta=1.0))
    grid = build_grid(-1.0, 1.0, N)
    sm = sample(model, grid)
    cs = build_constraint_system(sm, grid, sm.rho0, delta=1e-6)
    p = ObjectiveParams.from_model(sm, grid, tau=0.5)
    return sm, grid, cs, p


def _kkt_residual(state, cs, p, projector):
    """Stationarity plus feasibility: ||P grad F|| + ||Au-b||/(1+||b||)."""
    g = eval_gradient(state, p)
    feas = cs.feasibility(state.u) / (1.0 + float(np.linalg.norm(cs.b)))
    return float(np.linalg.norm(projector.apply(g))) + feas


def test_oracle_equivalence():
    worst_gap, worst_kkt = 0.0, 0.0
    cases = [(1, 4, seed) for seed in range(10)] \
        + [(2, 6, 100 + seed) for seed in range(10)]
    for s, N, seed in cases:
        sm, grid, cs, p = _oracle_instance(s, N, seed)
        projector = build_projector(cs)
        u0 = feasible_start(sm, grid, sm.rho0, cs.delta, poisson=cs.poisson)
        st_pg, rep = pg_solve(u0, cs, lambda st: eval_objective(st, p),
                              lambda st: eval_gradient(st, p),
                              PgParams(tol=1e-13, iter_max=500000),
                              projector=projector)
        st_ref = reference_minimizer(cs, p, grid, tol=1e-10)
        gap = float(np.max(np.abs(st_pg.rho - st_ref.rho)))
        kkt_pg = _kkt_residual(st_pg, cs, p, projector)
        kkt_ref = _kkt_residual(st_ref, cs, p, projector)
        assert gap <= 1e-6, (s, N, seed, gap)
        assert kkt_pg <= 1e-8, (s, N, seed, kkt_pg)
        assert kkt_ref <= 1e-8, (s, N, seed, kkt_ref)
        worst_gap = max(worst_gap, gap)
        worst_kkt = max(worst_kkt, kkt_pg, kkt_ref)
    _report("oracle equivalence",
            f"worst density gap {worst_gap:.3e}, "
            f"worst KKT residual {worst_kkt:.3e} on 20 instances")


# ------------------------------------------------------- convexity machinery

def test_interpolation_identities():
    rng = np.random.default_rng(7)
    worst_sq, worst_ratio = 0.0, 0.0
    for _ in range(1000):
        X0, X1 = rng.uniform(0.05, 5.0, 2)
        Y0, Y1 = rng.uniform(-4.0, 4.0, 2)
        th = float(rng.uniform(0.01, 0.99))
        r_sq, r_ent, r_ratio = interp_identity_residuals(X0, X1, Y0, Y1, th)
        scale_sq = X0 ** 2 + X1 ** 2 + (X1 - X0) ** 2
        scale_ratio = Y0 ** 2 / X0 + Y1 ** 2 / X1 \
            + (X1 * Y0 - X0 * Y1) ** 2 / (X0 * X1 * min(X0, X1))
        rel_sq = abs(r_sq) / scale_sq
        rel_ratio = abs(r_ratio) / scale_ratio
        assert rel_sq <= 1e-13
        assert rel_ratio <= 1e-13
        assert r_ent <= 0.0
        if abs(X0 - X1) > 1e-9:
            assert r_ent < 0.0
        worst_sq = max(worst_sq, rel_sq)
        worst_ratio = max(worst_ratio, rel_ratio)
    _report("interpolation identities",
            f"worst relative residuals {worst_sq:.3e} (squares), "
            f"{worst_ratio:.3e} (ratio), entropy sign held on 1000 draws")


def _feasible_state(cs, grid, rng):
    """Random state satisfying the step constraints exactly: densities
    share the anchor masses, momenta and potential are recovered."""
    s, N = cs.layout.s, cs.layout.N
    raw = rng.uniform(0.2, 2.0, (s, N))
    mass0 = cs.rho_prev.sum(axis=1)
    rho = raw * (mass0 / raw.sum(axis=1))[:, None]
    m = recover_momentum(rho, cs.rho_prev, grid)
    phi = solve_poisson(cs.poisson, rho)
    st = State(u=np.empty(cs.layout.dim), layout=cs.layout)
    st.rho[:] = rho
    st.m[:] = m
    st.phi[:] = phi
    return st


def test_midpoint_convexity():
    rng = np.random.default_rng(11)
    margin_min = np.inf
    for trial in range(200):
        s, N, seed = (1, 4, trial) if trial % 2 == 0 else (2, 6, trial)
        _, grid, cs, p = _oracle_instance(s, N, seed)
        st_a = _feasible_state(cs, grid, rng)
        st_b = _feasible_state(cs, grid, rng)
        mid = State(u=0.5 * (st_a.u + st_b.u), layout=cs.layout)
        fa = eval_objective(st_a, p).total_objective
        fb = eval_objective(st_b, p).total_objective
        fm = eval_objective(mid, p).total_objective
        mean = 0.5 * (fa + fb)
        scale = 1.0 + abs(fa) + abs(fb)
        assert fm <= mean + 1e-12 * scale
        if np.max(np.abs(st_a.rho - st_b.rho)) > 1e-8:
            assert fm < mean
            margin_min = min(margin_min, mean - fm)
    _report("midpoint convexity",
            f"200 feasible pairs, smallest strict margin {margin_min:.3e}")


# ----------------------------------------------------- feasibility invariance

def test_feasibility_invariance(res52, res53, reference51, table1, table2):
    ratios = {
        "example52": float(res52.diagnostics.column("max_feas_ratio").max()),
        "example53": float(res53.diagnostics.column("max_feas_ratio").max()),
        "reference": float(
            reference51.diagnostics.column("max_feas_ratio").max()),
        "table1": max(row.max_feas_ratio for row in table1),
        "table2": max(row.max_feas_ratio for row in table2),
    }
    for name, ratio in ratios.items():
        assert ratio <= 1e-8, (name, ratio)
    _report("feasibility invariance",
            ", ".join(f"{k} {v:.2e}" for k, v in ratios.items()))
