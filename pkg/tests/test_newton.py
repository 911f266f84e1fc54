import numpy as np
import pytest

from pnpflow import (BoundaryEnd, NewtonParams, ObjectiveParams, PgParams,
                     PnpModel, SpeciesSpec, build_constraint_system,
                     build_grid, eval_objective, feasible_start, newton_solve,
                     pg_solve, sample)
from pnpflow.functional import eval_gradient
from pnpflow.newton import _ReducedProblem


def make_case(N=8, pure_neumann=False, seed=0, tau=0.01):
    r = np.random.default_rng(seed)
    c1, c2 = r.uniform(0.8, 1.6, size=2)
    if pure_neumann:
        # equal charges cancel, so zero wall flux is compatible
        left = BoundaryEnd(kind="neumann")
        right = BoundaryEnd(kind="neumann")
        species = [
            SpeciesSpec(z=1.0, D=lambda x: 1.0 + 0.3 * x ** 2,
                        rho_in=lambda x: c1 * (1.2 + 0.3 * np.sin(2 * x))),
            SpeciesSpec(z=-1.0, D=lambda x: 1.0 + 0.0 * x,
                        rho_in=lambda x: c1 * (1.2 + 0.3 * np.sin(2 * x)))]
        f = lambda x: 0.0 * x
    else:
        left = BoundaryEnd(kind="dirichlet", phi_b=-1.0)
        right = BoundaryEnd(kind="robin", beta=0.7)
        species = [
            SpeciesSpec(z=1.0, D=lambda x: 1.0 + 0.3 * x ** 2,
                        rho_in=lambda x: c1 * (1.2 + 0.3 * np.sin(2 * x))),
            SpeciesSpec(z=-1.0, D=lambda x: 1.0 + 0.0 * x,
                        rho_in=lambda x: c2 * (2.0 - x ** 2))]
        f = lambda x: 0.1 * np.sin(x)
    model = PnpModel(species=species, epsilon=lambda x: 1.0 + 0.2 * np.cos(x),
                     f=f, left=left, right=right)
    grid = build_grid(-1.0, 1.0, N)
    sm = sample(model, grid)
    cs = build_constraint_system(sm, grid, sm.rho0, delta=1e-4)
    p = ObjectiveParams.from_model(sm, grid, tau)
    return sm, grid, cs, p


def fd_reduced_gradient(prob, m, eps=1e-7):
    g = np.zeros(m.size)
    flat = m.ravel()
    for k in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[k] += eps
        dn[k] -= eps
        fp = prob.objective(prob.state(up.reshape(m.shape))).total_objective
        fm = prob.objective(prob.state(dn.reshape(m.shape))).total_objective
        g[k] = (fp - fm) / (2.0 * eps)
    return g


@pytest.mark.parametrize("pure_neumann", [False, True])
def test_reduced_gradient_matches_finite_differences(pure_neumann):
    _, _, cs, p = make_case(N=10, pure_neumann=pure_neumann, seed=1)
    prob = _ReducedProblem(cs, p)
    rng = np.random.default_rng(2)
    s, N = cs.layout.s, cs.layout.N
    for _ in range(3):
        m = 0.01 * rng.standard_normal((s, N - 1))
        st = prob.state(m)
        assert st is not None
        g = prob.gradient(st)
        g_fd = fd_reduced_gradient(prob, m)
        rel = np.linalg.norm(g - g_fd) / (1.0 + np.linalg.norm(g_fd))
        assert rel <= 1e-6


@pytest.mark.parametrize("pure_neumann", [False, True])
def test_hessian_action_matches_gradient_differences(pure_neumann):
    _, _, cs, p = make_case(N=8, pure_neumann=pure_neumann, seed=3)
    prob = _ReducedProblem(cs, p)
    rng = np.random.default_rng(4)
    s, N = cs.layout.s, cs.layout.N
    m = 0.01 * rng.standard_normal((s, N - 1))
    st = prob.state(m)
    act, diag = prob.hessian_action(st)
    assert diag.shape == (s * (N - 1),)
    assert np.all(diag > 0.0)
    eps = 1e-6
    for _ in range(4):
        v = rng.standard_normal(s * (N - 1))
        gp = prob.gradient(prob.state((m.ravel() + eps * v).reshape(m.shape)))
        gm = prob.gradient(prob.state((m.ravel() - eps * v).reshape(m.shape)))
        hv_fd = (gp - gm) / (2.0 * eps)
        hv = act(v)
        rel = np.linalg.norm(hv - hv_fd) / (1.0 + np.linalg.norm(hv_fd))
        assert rel <= 1e-6


def test_hessian_is_symmetric_positive():
    _, _, cs, p = make_case(N=6, seed=5)
    prob = _ReducedProblem(cs, p)
    m = np.zeros((cs.layout.s, cs.layout.N - 1))
    st = prob.state(m)
    act, _ = prob.hessian_action(st)
    n = m.size
    H = np.column_stack([act(col) for col in np.eye(n)])
    assert np.allclose(H, H.T, atol=1e-12)
    w = np.linalg.eigvalsh(0.5 * (H + H.T))
    assert w.min() > 0.0


def test_state_none_outside_positive_cone():
    _, _, cs, p = make_case(N=6, seed=6)
    prob = _ReducedProblem(cs, p)
    m = np.zeros((cs.layout.s, cs.layout.N - 1))
    m[0, 0] = 100.0  # drains the first cell far below zero
    assert prob.state(m) is None


def test_state_is_feasible_by_construction():
    _, _, cs, p = make_case(N=9, seed=7)
    prob = _ReducedProblem(cs, p)
    rng = np.random.default_rng(8)
    b_scale = 1.0 + float(np.linalg.norm(cs.b))
    for _ in range(5):
        m = 0.05 * rng.standard_normal((cs.layout.s, cs.layout.N - 1))
        st = prob.state(m)
        assert cs.feasibility(st.u) <= 1e-12 * b_scale
        # per species masses equal those of the anchor densities
        assert np.allclose(st.rho.sum(axis=1), cs.rho_prev.sum(axis=1),
                           rtol=0, atol=1e-13)


@pytest.mark.parametrize("pure_neumann", [False, True])
def test_newton_converges_with_tiny_gradient(pure_neumann):
    _, _, cs, p = make_case(N=12, pure_neumann=pure_neumann, seed=9)
    st, rep = newton_solve(cs, p, NewtonParams(gtol=1e-11))
    assert rep.status == "converged"
    assert rep.grad_norm <= 1e-7  # noise floor at worst
    assert rep.iterations <= 30
    b_scale = 1.0 + float(np.linalg.norm(cs.b))
    assert rep.final_feasibility <= 1e-11 * b_scale
    assert rep.min_rho > 0.0
    assert rep.breakdown.finite
    assert np.isclose(rep.objective,
                      eval_objective(st, p).total_objective, rtol=1e-12)


def test_newton_agrees_with_projected_gradient():
    sm, grid, cs, p = make_case(N=6, seed=10, tau=0.005)
    st_n, rep_n = newton_solve(cs, p, NewtonParams(gtol=1e-12))
    u0 = feasible_start(sm, grid, sm.rho0, cs.delta, poisson=cs.poisson)
    st_p, rep_p = pg_solve(u0, cs, lambda s: eval_objective(s, p),
                           lambda s: eval_gradient(s, p),
                           PgParams(tol=1e-9, iter_max=100000))
    assert np.max(np.abs(st_n.rho - st_p.rho)) <= 1e-6
    assert np.max(np.abs(st_n.phi - st_p.phi)) <= 1e-6
    assert abs(rep_n.objective - rep_p.objective) <= 1e-10 * (
        1.0 + abs(rep_p.objective))


def test_newton_descends_from_warm_start():
    _, _, cs, p = make_case(N=10, seed=11)
    prob = _ReducedProblem(cs, p)
    f0 = prob.objective(prob.state(np.zeros((cs.layout.s, cs.layout.N - 1)))
                        ).total_objective
    _, rep = newton_solve(cs, p)
    assert rep.objective <= f0 + 1e-12 * (1.0 + abs(f0))


def test_newton_iteration_budget_status():
    _, _, cs, p = make_case(N=12, seed=12)
    _, rep = newton_solve(cs, p, NewtonParams(gtol=1e-16, iter_max=1,
                                              stall_gtol=1e-16))
    assert rep.status in ("max-iterations", "converged")
    assert rep.iterations <= 1


def test_newton_custom_start_point():
    _, _, cs, p = make_case(N=8, seed=13)
    rng = np.random.default_rng(14)
    m0 = 0.01 * rng.standard_normal((cs.layout.s, cs.layout.N - 1))
    st, rep = newton_solve(cs, p, NewtonParams(gtol=1e-11), m0=m0)
    assert rep.status == "converged"
    st_ref, _ = newton_solve(cs, p, NewtonParams(gtol=1e-11))
    assert np.max(np.abs(st.rho - st_ref.rho)) <= 1e-8
