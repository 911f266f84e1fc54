import numpy as np
import pytest

import pnpflow.driver as driver
from pnpflow import (BoundaryEnd, ConfigurationError, NewtonParams,
                     ObjectiveParams, PgParams, PnpModel, RunConfig,
                     SolverError, SpeciesSpec, build_constraint_system,
                     build_grid, convergence_study, newton_solve,
                     reference_minimizer, run, sample, select_delta)
from pnpflow.driver import _restrict, advance_step


def two_species_model():
    return PnpModel(
        species=[SpeciesSpec(z=1.0, D=lambda x: 1.0 + 0.0 * x,
                             rho_in=lambda x: 2.0 - x ** 2),
                 SpeciesSpec(z=-1.0, D=lambda x: 1.0 + 0.0 * x,
                             rho_in=lambda x: 2.0 + np.sin(np.pi * x))],
        epsilon=lambda x: 1.0 + 0.0 * x,
        f=lambda x: 0.0 * x,
        left=BoundaryEnd(kind="dirichlet", phi_b=-1.0),
        right=BoundaryEnd(kind="dirichlet", phi_b=1.0))


def test_select_delta_frozen_cases():
    # smooth data with minimum 1: the initial minimum wins
    assert select_delta(0.05, 0.01, np.array([1.0, 2.0])) == 1.0
    # tiny initial samples: the h^2 vs tau floor wins
    assert select_delta(0.05, 0.01, np.array([0.002, 2.0])) == 0.05 * 0.05
    assert select_delta(0.05, 0.01, np.array([0.004, 2.0])) == 0.004
    assert select_delta(0.1, 0.5, np.array([0.005, 3.0])) == 0.1 * 0.1
    # data touching zero fall back to min(h^2, tau)
    assert select_delta(0.1, 0.5, np.array([0.0, 3.0])) == 0.1 * 0.1
    assert select_delta(0.2, 0.001, np.array([-0.5, 3.0])) == 0.001


def test_run_config_steps_and_validation():
    assert RunConfig(tau=0.01, T=2.0).num_steps() == 200
    assert RunConfig(tau=0.5, T=0.5).num_steps() == 1
    with pytest.raises(ConfigurationError):
        RunConfig(tau=0.3, T=1.0).num_steps()
    with pytest.raises(ConfigurationError):
        RunConfig(tau=0.1, T=0.0).num_steps()
    with pytest.raises(ConfigurationError):
        RunConfig(tau=0.1, T=1.0, solver="simplex")


def test_advance_step_postconditions():
    model = two_species_model()
    grid = build_grid(-1.0, 1.0, 10)
    sm = sample(model, grid)
    cfg = RunConfig(tau=0.01, T=0.01, pg=PgParams(tol=1e-7, iter_max=50000))
    state, rec = advance_step(sm.rho0, sm, grid, cfg, step=1, t=0.01)
    mass0 = grid.h * sm.rho0.sum(axis=1)
    assert np.allclose(rec.mass, mass0, rtol=0, atol=1e-10)
    assert rec.min_rho > 0.0
    assert rec.t == 0.01
    assert rec.pg_status == "converged"
    # one step dissipates the free energy from the initial state
    p = ObjectiveParams.from_model(sm, grid, cfg.tau)
    from pnpflow import eval_objective, feasible_start
    u0 = feasible_start(sm, grid, sm.rho0, 1e-4)
    assert rec.energy <= eval_objective(u0, p).diagnostic_energy + 2e-8


def test_run_diagnostics_and_snapshots():
    model = two_species_model()
    grid = build_grid(-1.0, 1.0, 8)
    cfg = RunConfig(tau=0.05, T=0.25, snapshot_times=(0.0, 0.1, 0.12, 9.0),
                    pg=PgParams(tol=1e-7, iter_max=20000))
    seen = []
    res = run(model, grid, cfg, step_callback=lambda r: seen.append(r.t))

    n = cfg.num_steps()
    assert len(res.diagnostics.records) == n + 1
    assert np.allclose(seen, 0.05 * np.arange(n + 1))
    t_col = res.diagnostics.column("t")
    assert np.allclose(t_col, 0.05 * np.arange(n + 1))

    mass = res.diagnostics.column("mass")
    assert mass.shape == (n + 1, 2)
    assert np.max(np.abs(mass - mass[0])) <= 1e-10

    energy = res.diagnostics.column("energy")
    assert np.all(np.diff(energy) <= 2.0 * cfg.pg.tol)
    assert np.all(res.diagnostics.column("min_rho") > 0.0)

    # snapshots: 0.0 at step 0, 0.1 at step 2, 0.12 rounds to step 2,
    # 9.0 clamps to the final step
    taken = {s.t_requested: s.t for s in res.snapshots}
    assert taken == {0.0: 0.0, 0.1: 0.1,
                     0.12: pytest.approx(0.1), 9.0: pytest.approx(0.25)}
    assert res.final.t == pytest.approx(0.25)
    assert res.final.rho.shape == (2, 8)
    assert res.final.phi.shape == (10,)
    for snap in res.snapshots:
        assert snap.rho.min() > 0.0


def test_run_solvers_agree():
    model = two_species_model()
    grid = build_grid(-1.0, 1.0, 8)
    base = dict(tau=0.02, T=0.06)
    res_pg = run(model, grid, RunConfig(
        pg=PgParams(tol=1e-9, iter_max=200000), **base))
    res_nw = run(model, grid, RunConfig(
        solver="newton", newton=NewtonParams(gtol=1e-12), **base))
    assert np.max(np.abs(res_pg.final.rho - res_nw.final.rho)) <= 1e-6
    assert np.max(np.abs(res_pg.final.phi - res_nw.final.phi)) <= 1e-6


def test_run_delta_override():
    model = two_species_model()
    grid = build_grid(-1.0, 1.0, 6)
    cfg = RunConfig(tau=0.05, T=0.05, delta_override=0.5,
                    solver="newton")
    res = run(model, grid, cfg)
    assert res.delta == 0.5
    with pytest.raises(ConfigurationError):
        run(model, grid, RunConfig(tau=0.05, T=0.05, delta_override=-1.0))


def test_run_attaches_partial_result(monkeypatch):
    model = two_species_model()
    grid = build_grid(-1.0, 1.0, 6)
    real = driver.advance_step
    calls = []

    def failing(rho_prev, sm, grid_, cfg, **kw):
        calls.append(kw.get("step"))
        if kw.get("step") == 3:
            raise SolverError("rigged failure", step=3)
        return real(rho_prev, sm, grid_, cfg, **kw)

    monkeypatch.setattr(driver, "advance_step", failing)
    cfg = RunConfig(tau=0.05, T=0.25, solver="newton")
    with pytest.raises(SolverError) as exc_info:
        run(model, grid, cfg)
    partial = exc_info.value.partial_result
    # initial row plus the two completed steps
    assert len(partial.diagnostics.records) == 3
    assert partial.final.rho.shape == (2, 6)
    assert calls == [1, 2, 3]


def test_restrict_exact_on_linear_fields():
    fine = build_grid(-1.0, 1.0, 32)
    coarse = build_grid(-1.0, 1.0, 8)
    values = 2.0 * fine.centers + 1.0
    got = _restrict(values, fine.centers, coarse.centers)
    assert np.allclose(got, 2.0 * coarse.centers + 1.0, atol=1e-14)


def test_convergence_study_smoke():
    model = two_species_model()
    ref_grid = build_grid(-1.0, 1.0, 16)
    reference = run(model, ref_grid, RunConfig(tau=0.0125, T=0.25,
                                               solver="newton"))
    rows = convergence_study(model, -1.0, 1.0, base_N=4, levels=2,
                             coupling="tau=h2", T_eval=0.25,
                             reference=reference,
                             level_solver="newton")
    assert len(rows) == 2
    assert rows[1].h == pytest.approx(rows[0].h / 2.0)
    assert rows[1].tau == pytest.approx(rows[1].h ** 2)
    for name in ("rho_1", "rho_2", "phi"):
        assert rows[0].errors[name] > 0.0
        assert rows[0].orders[name] is None
        assert rows[1].errors[name] < rows[0].errors[name]
        assert rows[1].orders[name] > 0.0
    assert rows[0].max_feas_ratio <= 1e-9


def test_convergence_study_validation():
    model = two_species_model()
    with pytest.raises(ConfigurationError):
        convergence_study(model, -1.0, 1.0, levels=1)
    with pytest.raises(ConfigurationError):
        convergence_study(model, -1.0, 1.0, coupling="tau=h3")
    with pytest.raises(ConfigurationError):
        # reference grid does not refine the level grids
        convergence_study(model, -1.0, 1.0, base_N=6, levels=2, ref_N=16)


def test_reference_minimizer_matches_newton():
    model = two_species_model()
    grid = build_grid(-1.0, 1.0, 5)
    sm = sample(model, grid)
    tau = 0.01
    cs = build_constraint_system(sm, grid, sm.rho0, delta=1e-4)
    p = ObjectiveParams.from_model(sm, grid, tau)
    st_ref = reference_minimizer(cs, p, grid, tol=1e-10)
    st_nw, rep = newton_solve(cs, p, NewtonParams(gtol=1e-12))
    assert rep.status == "converged"
    assert np.max(np.abs(st_ref.rho - st_nw.rho)) <= 1e-6
    assert np.max(np.abs(st_ref.phi - st_nw.phi)) <= 1e-6
    b_scale = 1.0 + float(np.linalg.norm(cs.b))
    assert cs.feasibility(st_ref.u) <= 1e-9 * b_scale


def test_reference_minimizer_rejects_large_instances():
    model = two_species_model()
    grid = build_grid(-1.0, 1.0, 64)
    sm = sample(model, grid)
    cs = build_constraint_system(sm, grid, sm.rho0, delta=1e-4)
    p = ObjectiveParams.from_model(sm, grid, 0.01)
    with pytest.raises(ValueError):
        reference_minimizer(cs, p, grid)
