import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import FIXTURES, small_problem, step1_result
from fracstep.assembly import assemble_mass, assemble_weighted_stiffness
from fracstep.errors import ConsistencyFailure, InvalidArgument
from fracstep.geometry import interval_mesh
from fracstep.materials import BoundaryData, make_model
from fracstep.minimizers import brute_force_min
from fracstep.stepper import (
    DELAYED_ARGS,
    SchemeParams,
    Step1Objective,
    advance,
    delayed_args,
    initial_state,
    run,
    step1_mech_phase,
    step2_diffusion,
    step3_damage,
    step4_heat,
    tau_admissible,
)

GRID = 401


def test_delayed_argument_table_matches_fixture():
    fixture = json.loads((FIXTURES / "delayed_args.json").read_text())
    assert DELAYED_ARGS == fixture


def test_delayed_args_picks_levels():
    prev = {"E": "Ep", "chi": "xp", "c": "cp", "d": "dp", "theta": "tp"}
    cur = {"E": "Ek", "chi": "xk", "c": "ck", "d": "dk", "theta": "tk"}
    assert delayed_args("step2", "mobility", prev, cur) == ("Ek", "xk", "cp", "dp", "tp")
    assert delayed_args("step4", "conductivity", prev, cur) == ("Ek", "xk", "ck", "dk", "tk")
    assert delayed_args("step1", "zeta", prev, cur) == ("Ep", "xp", "cp", "dp", "tp")


class TestTauAdmissible:
    def test_bound(self):
        m = make_model("hydride", M_semiconvex=2.0, b_rate=0.5)
        assert tau_admissible(m, 10.0) == 0.25

    def test_no_semiconvexity(self):
        assert tau_admissible(make_model("hydride", M_semiconvex=0.0), 3.0) == 3.0

    def test_horizon_limited(self):
        assert tau_admissible(make_model("hydride", M_semiconvex=1.0, b_rate=10.0), 0.1) == 0.1

    def test_rate_limited(self):
        assert tau_admissible(make_model("hydride", M_semiconvex=0.1, b_rate=0.1), 10.0) == pytest.approx(0.04)


def rest_state(problem, **kw):
    args = dict(chi0=0.0, c0=0.0, d0=1.0, theta0=1.0)
    args.update(kw)
    return initial_state(problem, **args)


# ---------------------------------------------------------------------------
# single-cell oracles (independent closed forms of each step's objective)
# ---------------------------------------------------------------------------


def step1_oracle(P, prev_chi, c, d, tau):
    """Step-1 energy on one unit cell with u pinned at both ends, as a function of (chi0, chi1)."""
    s = P["delta"] + d
    eps, k, a, b, D, k1 = P["eps_sw"], P["k"], P["a_rate"], P["b_rate"], P["viscosity"], P["kappa1"]

    def f(X):
        x0, x1 = X[:, 0], X[:, 1]
        d0, d1 = x0 - prev_chi[0], x1 - prev_chi[1]
        quad = lambda p, q: (p * p + p * q + q * q) / 3.0  # int of a linear function squared
        val = 0.5 * s * P["C"] * eps**2 * quad(x0, x1)
        val += 0.5 * D / tau * eps**2 * quad(d0, d1)
        for x, dx, ci in ((x0, d0, c[0]), (x1, d1, c[1])):
            val += 0.5 * (0.5 * k * (x - ci) ** 2 + b * dx**2 / tau + a * np.abs(dx))
        val += 0.5 * k1 * (x1 - x0) ** 2
        return val

    return f


def random_step1_instance(rng):
    P = dict(
        C=rng.uniform(1, 50),
        lam=0.0,
        G=0.0,
        delta=rng.uniform(0.1, 1.0),
        eps_sw=rng.uniform(0.0, 0.3),
        k=rng.uniform(0.5, 3.0),
        a_rate=rng.uniform(0.0, 0.5),
        b_rate=rng.uniform(0.1, 1.0),
        viscosity=rng.uniform(0.0, 0.1),
        kappa1=rng.uniform(1e-3, 0.1),
    )
    tau = rng.uniform(0.005, 0.05)
    return P, tau, rng.uniform(0, 1, 2), rng.uniform(0, 1, 2), rng.uniform(0, 1)


def run_step1_instance(P, tau, chi_prev, c, d):
    prob = small_problem(tau=tau, pins=((0, 0), (1, 0)), **P)
    prev = initial_state(prob, chi0=chi_prev, c0=c, d0=d, theta0=1.0)
    s1 = step1_mech_phase(prob, prev, prev.u, prob.loads(tau), tau)
    return s1.chi[:, 0]


def step2_oracle_matrix(P, tau, h):
    """Linear system of Step 2 for quadratic chemistry on one unit cell (lumped, counting boundary)."""
    m = np.array([0.5, 0.5])
    A = P["mob"] * np.array([[1.0, -1.0], [-1.0, 1.0]])
    H = np.diag(m / (P["k"] * tau)) + A
    return H, m, np.asarray(h, dtype=float)


def random_step2_instance(rng):
    P = dict(k=rng.uniform(0.5, 3.0), mob=rng.uniform(0.05, 2.0))
    return P, rng.uniform(0.005, 0.05), rng.uniform(0, 1, 2), rng.uniform(0, 1, 2), rng.uniform(0, 0.5, 2)


def run_step2_instance(P, tau, chi, c_prev, h):
    bc = BoundaryData(h_surf=lambda t: h)
    prob = small_problem(tau=tau, pins=((0, 0), (1, 0)), bc=bc, **P)
    prev = initial_state(prob, chi0=chi, c0=c_prev, theta0=1.0)
    c, mu, _ = step2_diffusion(prob, step1_result(prob, prev), prev, prob.loads(tau), tau)
    return c, mu


def step3_oracle(P, E, d_prev):
    s_alpha = P["alpha0"]

    def f(X):
        d0, d1 = X[:, 0], X[:, 1]
        mech = 0.5 * P["C"] * E**2 * (P["delta"] + 0.5 * (d0 + d1))
        return mech - 0.5 * s_alpha * (d0 + d1) + 0.5 * P["kappa2"] * (d1 - d0) ** 2

    return f


def random_step3_instance(rng):
    P = dict(C=rng.uniform(0.5, 5), delta=rng.uniform(0.05, 0.5), alpha0=rng.uniform(0.2, 2.0),
             alpha1=0.0, kappa2=rng.uniform(1e-3, 0.5))
    return P, rng.uniform(0, 2.0), rng.uniform(0.05, 1, 2)


def run_step3_instance(P, E, d_prev):
    prob = small_problem(tau=0.01, **P)
    prev = initial_state(prob, d0=d_prev, theta0=1.0)
    s1 = step1_result(prob, prev, u=[0.0, E])
    d, _ = step3_damage(prob, s1, prev, 0.01)
    return d


def step4_oracle(P, tau, prev, chi_k, E_k, mu_k, d_k, q):
    """Linear Step-4 system on one unit cell for the linear-heat-capacity model, plus its sources."""
    m = np.array([0.5, 0.5])
    rate = (chi_k - prev["chi"]) / tau
    phase = m * (P["a_rate"] * np.abs(rate) + 2 * P["b_rate"] * rate**2)
    alpha = P["alpha0"] * (1 - P["alpha1"] * chi_k)
    damage = m * alpha * (prev["d"] - d_k) / tau
    Ed = (E_k - prev["E"]) / tau
    visc = m * P["viscosity"] * Ed**2 / (1 + tau * Ed**2)
    g = mu_k[1] - mu_k[0]
    diff = m * P["mob"] * g**2 / (1 + tau * g**2)
    S = phase + damage + visc + diff + q
    K = P["cond"] * np.array([[1.0, -1.0], [-1.0, 1.0]])
    H = np.diag(m * P["cv"] / tau) + K
    rhs = m * P["cv"] * prev["theta"] / tau + S
    return H, rhs


def random_step4_instance(rng):
    P = dict(cv=rng.uniform(0.5, 3), cond=rng.uniform(0.01, 1), mob=rng.uniform(0.01, 1),
             viscosity=rng.uniform(0, 0.2), a_rate=rng.uniform(0, 0.5), b_rate=rng.uniform(0.1, 1),
             alpha0=rng.uniform(0.1, 1), alpha1=rng.uniform(0, 0.9), eps_sw=0.0)
    tau = rng.uniform(0.005, 0.05)
    prev = dict(chi=rng.uniform(0, 1, 2), d=rng.uniform(0.2, 1, 2), theta=rng.uniform(0.1, 3, 2),
                E=rng.uniform(-0.5, 0.5))
    chi_k = np.clip(prev["chi"] + rng.normal(0, 0.02, 2), 0, 1)
    E_k = prev["E"] + rng.normal(0, 0.05)
    mu_k = rng.normal(0, 1, 2)
    d_k = prev["d"] * rng.uniform(0.9, 1.0, 2)
    q = rng.uniform(0, 0.5, 2)
    return P, tau, prev, chi_k, E_k, mu_k, d_k, q


def run_step4_instance(P, tau, prev, chi_k, E_k, mu_k, d_k, q):
    bc = BoundaryData(q_surf=lambda t: q)
    prob = small_problem(tau=tau, bc=bc, **P)
    st = initial_state(prob, u0=[[0.0], [prev["E"]]], chi0=prev["chi"], d0=prev["d"], theta0=prev["theta"])
    E_q = np.full_like(st.E_e, E_k)
    theta, w, sources, _ = step4_heat(prob, st, chi_k[:, None], E_q, st.c, mu_k, d_k, prob.loads(tau), tau)
    return theta, w, sources


# ---------------------------------------------------------------------------
# step 1
# ---------------------------------------------------------------------------


class TestStep1:
    def test_equilibrium_fixed_point(self):
        prob = small_problem(n_cells=4, tau=0.01, pins=((0, 0),), rho=1e-3, viscosity=0.01)
        prev = rest_state(prob)
        s1 = step1_mech_phase(prob, prev, prev.u, prob.loads(0.01), 0.01)
        assert_allclose(s1.u, prev.u, atol=1e-14)
        assert_allclose(s1.chi, prev.chi, atol=1e-14)
        assert_allclose(s1.chi_rate, 0.0, atol=1e-12)

    def test_quasistatic_linear_elastic_solve(self):
        n, C, delta, eps, chi0 = 4, 3.0, 0.5, 0.1, 0.2
        f, t_right = 1.0, 0.5
        mesh = interval_mesh(n, 1.0)
        bc = BoundaryData(
            f_bulk=lambda t: np.ones((n + 1, 1)) * f,
            f_surf=lambda t: np.array([[0.0], [t_right]]),
        )
        prob = small_problem(mesh=mesh, tau=0.1, quasistatic=True, bc=bc, C=C, delta=delta,
                             eps_sw=eps, a_rate=np.inf)
        prev = rest_state(prob, chi0=chi0)
        s1 = step1_mech_phase(prob, prev, prev.u, prob.loads(0.1), 0.1)
        s = delta + 1.0
        K = (s * C * assemble_weighted_stiffness(mesh, 1.0)).toarray()
        rhs = assemble_mass(mesh) @ np.full(n + 1, f)
        rhs[-1] += t_right + s * C * eps * chi0
        rhs[0] -= s * C * eps * chi0
        u = np.zeros(n + 1)
        u[1:] = np.linalg.solve(K[1:, 1:], rhs[1:])
        assert_allclose(s1.u[:, 0], u, atol=1e-10)
        assert_array_equal(s1.chi, prev.chi)

    @pytest.mark.parametrize("seed", range(5))
    def test_single_cell_brute_force(self, seed):
        P, tau, chi_prev, c, d = random_step1_instance(np.random.default_rng(seed))
        chi = run_step1_instance(P, tau, chi_prev, c, d)
        xb, _ = brute_force_min(step1_oracle(P, chi_prev, c, d, tau), [0, 0], [1, 1], GRID)
        assert np.all(np.abs(chi - xb) <= 1.0 / (GRID - 1) + 1e-12)

    def test_variational_inequality_random_directions(self):
        rng = np.random.default_rng(7)
        bc = BoundaryData(h_surf=lambda t: np.array([0.3, 0.0]), f_surf=lambda t: np.array([[0.0], [0.2]]))
        prob = small_problem(n_cells=8, tau=0.01, bc=bc, pins=((0, 0),), a_rate=0.05, eps_sw=0.2,
                             rho=1e-3, viscosity=0.01, C=5.0)
        prev = rest_state(prob, chi0=np.linspace(0, 1, 9), c0=0.5)
        loads = prob.loads(0.01)
        s1 = step1_mech_phase(prob, prev, prev.u, loads, 0.01)
        obj = Step1Objective(prob, prev, prev.u, loads, 0.01)
        w, s = obj.l1()
        total = lambda z: obj.value(z) + float(np.sum(w * np.abs(z - s)))
        x = np.concatenate([s1.u.ravel(), s1.chi.ravel()])
        lo, hi = obj.bounds()
        f0 = total(x)
        for _ in range(20):
            y = np.clip(x + 1e-3 * rng.normal(size=x.size), lo, hi)
            assert total(y) >= f0 - 1e-12 * max(1.0, abs(f0))

    def test_chi_stays_in_box_and_reaction_sign(self):
        bc = BoundaryData(h_surf=lambda t: np.array([5.0, 0.0]))
        prob = small_problem(n_cells=4, tau=0.05, bc=bc, pins=((0, 0), (4, 0)), k=10.0, eps_sw=0.0)
        prev = rest_state(prob, chi0=1.0, c0=3.0)
        s1 = step1_mech_phase(prob, prev, prev.u, prob.loads(0.05), 0.05)
        assert np.all(s1.chi <= 1.0)
        assert_allclose(s1.chi, 1.0)
        # the phase field is pushed upwards against the bound
        assert np.all(s1.sigma_r >= 0) and np.any(s1.sigma_r > 0)


# ---------------------------------------------------------------------------
# step 2
# ---------------------------------------------------------------------------


class TestStep2:
    def test_no_flux_steady_point(self):
        prob = small_problem(n_cells=4, tau=0.01, k=2.0)
        prev = rest_state(prob, chi0=0.4, c0=0.9)
        s1 = step1_result(prob, prev)
        c, mu, _ = step2_diffusion(prob, s1, prev, prob.loads(0.01), 0.01)
        assert_allclose(c, 0.9, atol=1e-12)
        assert_allclose(mu, 1.0, atol=1e-12)

    def test_total_mass_two_nodes(self):
        h = np.array([0.3, 0.1])
        c, mu = run_step2_instance(dict(k=2.0, mob=0.7), 0.02, np.array([0.2, 0.6]), np.array([0.9, 0.1]), h)
        assert abs(0.5 * c.sum() - 0.5 * 1.0 - 0.02 * h.sum()) <= 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_linear_system_oracle(self, seed):
        P, tau, chi, c_prev, h = random_step2_instance(np.random.default_rng(100 + seed))
        c, mu = run_step2_instance(P, tau, chi, c_prev, h)
        H, m, b = step2_oracle_matrix(P, tau, h)
        mu_ref = np.linalg.solve(H, m * (c_prev - chi) / tau + b)
        assert_allclose(mu, mu_ref, atol=1e-10)
        assert_allclose(c, chi + mu_ref / P["k"], atol=1e-10)

    def test_delayed_mobility_arguments(self):
        # mobility reads c and d at the previous level: a model that depends on them
        # must see the old values even when step 1 changed chi
        seen = {}

        class Probe(type(make_model("hydride"))):
            def mobility(self, E, chi, c, d, theta):
                seen.update(c=np.array(c), d=np.array(d), chi=np.array(chi))
                return super().mobility(E, chi, c, d, theta)

        from dataclasses import dataclass

        Probe = dataclass(frozen=True)(Probe)
        mesh = interval_mesh(2, 1.0)
        from fracstep.stepper import Problem

        prob = Problem(mesh, Probe(C=1.0, lam=0.0, G=0.0), BoundaryData(), SchemeParams(tau=0.1, t_end=0.1, pin_dofs=((0, 0),)))
        prev = rest_state(prob, chi0=0.1, c0=0.7, d0=0.9)
        s1 = step1_result(prob, prev, chi=[0.5, 0.5, 0.5])
        step2_diffusion(prob, s1, prev, prob.loads(0.1), 0.1)
        assert_allclose(seen["c"], 0.7)
        assert_allclose(seen["d"], 0.9)
        assert_allclose(seen["chi"], 0.5)


# ---------------------------------------------------------------------------
# step 3
# ---------------------------------------------------------------------------


class TestStep3:
    P = dict(C=1.0, delta=0.1, alpha0=1.0, alpha1=0.0, kappa2=1e-9)

    def test_full_step_down(self):
        assert_allclose(run_step3_instance(self.P, 2.0, np.ones(2)), 0.0)

    def test_no_damage(self):
        assert_array_equal(run_step3_instance(self.P, 1.0, np.ones(2)), 1.0)

    def test_flat_objective_stays_put(self):
        d = run_step3_instance(self.P, np.sqrt(2.0), np.ones(2))
        assert_array_equal(d, 1.0)

    def test_monotone_exactly(self):
        d_prev = np.array([0.7, 0.3])
        d = run_step3_instance(self.P, 1.2, d_prev)
        assert np.all(d <= d_prev) and np.all(d >= 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_single_cell_brute_force(self, seed):
        P, E, d_prev = random_step3_instance(np.random.default_rng(200 + seed))
        d = run_step3_instance(P, E, d_prev)
        xb, _ = brute_force_min(step3_oracle(P, E, d_prev), [0, 0], d_prev, GRID)
        assert np.all(np.abs(d - xb) <= d_prev / (GRID - 1) + 1e-12)


# ---------------------------------------------------------------------------
# step 4
# ---------------------------------------------------------------------------


class TestStep4:
    def test_stationary(self):
        prob = small_problem(n_cells=4, tau=0.01)
        prev = rest_state(prob, theta0=1.7)
        theta, w, _, _ = step4_heat(prob, prev, prev.chi, prev.E_e, prev.c, prev.mu, prev.d, prob.loads(0.01), 0.01)
        assert_allclose(theta, 1.7, rtol=1e-13)
        assert_allclose(w, prev.w, rtol=1e-13)

    def test_damage_heat_only(self):
        prob = small_problem(tau=1.0, cv=2.0, alpha0=1.0, alpha1=0.0)
        prev = rest_state(prob, theta0=3.0, d0=1.0)
        theta, w, src, _ = step4_heat(prob, prev, prev.chi, prev.E_e, prev.c, prev.mu, np.zeros(2), prob.loads(1.0), 1.0)
        assert_allclose(w, 7.0, rtol=1e-12)
        assert_allclose(theta, 3.5, rtol=1e-12)
        assert np.all(src.damage >= 0)

    def test_regularized_viscous_heat(self):
        tau = 0.01
        prob = small_problem(tau=tau, cv=1.0, viscosity=1.0, eps_sw=0.0)
        prev = rest_state(prob, theta0=1.0)
        E_k = prev.E_e + 3.0 * tau
        theta, w, src, _ = step4_heat(prob, prev, prev.chi, E_k, prev.c, prev.mu, prev.d, prob.loads(tau), tau)
        assert_allclose(w - prev.w, tau * 9.0 / (1 + tau * 9.0), rtol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_linear_system_oracle(self, seed):
        args = random_step4_instance(np.random.default_rng(300 + seed))
        theta, w, _ = run_step4_instance(*args)
        H, rhs = step4_oracle(*args)
        assert_allclose(theta, np.linalg.solve(H, rhs), rtol=1e-10, atol=1e-12)
        assert_allclose(w, args[0]["cv"] * theta, rtol=1e-14)

    def test_theta_nonnegative_under_cooling_flux_free(self):
        prob = small_problem(n_cells=4, tau=0.5, cv=1.0, cond=10.0)
        prev = rest_state(prob, theta0=np.array([0.0, 0.0, 2.0, 0.0, 0.0]))
        theta, *_ = step4_heat(prob, prev, prev.chi, prev.E_e, prev.c, prev.mu, prev.d, prob.loads(0.5), 0.5)
        assert np.all(theta >= -1e-12)


# ---------------------------------------------------------------------------
# advance and run
# ---------------------------------------------------------------------------


class TestAdvance:
    def test_equilibrium_unchanged(self):
        prob = small_problem(n_cells=8, tau=0.01, rho=1e-3, viscosity=0.01)
        prev = rest_state(prob)
        new, _ = advance(prob, prev)
        assert new.t == pytest.approx(0.01)
        for f in ("u", "v", "chi", "c", "mu", "d", "w", "theta"):
            assert_allclose(getattr(new, f), getattr(prev, f), atol=1e-13, err_msg=f)

    def test_start_up_velocity(self):
        tau, rho, g = 0.05, 2.0, 0.4
        bc = BoundaryData(f_bulk=lambda t: np.full((5, 1), g))
        prob = small_problem(n_cells=4, tau=tau, pins=(), C=0.0, eps_sw=0.0, rho=rho, a_rate=np.inf)
        prob_f = small_problem(n_cells=4, tau=tau, pins=(), C=0.0, eps_sw=0.0, rho=rho, a_rate=0.0, bc=bc)
        v0 = 0.3
        s0 = rest_state(prob, v0=v0)
        new, _ = advance(prob, s0)
        assert_allclose(new.u, s0.u + tau * v0, atol=1e-13)
        s0f = rest_state(prob_f, v0=v0)
        new_f, _ = advance(prob_f, s0f)
        # rho (u1 - u0 - tau v0) / tau^2 = g
        assert_allclose(rho * (new_f.u - s0f.u - tau * v0) / tau**2, g, rtol=1e-9)

    def test_explicit_prev2_matches_default(self):
        prob = small_problem(n_cells=4, tau=0.02, rho=1e-2, viscosity=0.01, eps_sw=0.1)
        s0 = rest_state(prob, v0=0.1, chi0=0.3, c0=0.5)
        a, _ = advance(prob, s0)
        b, _ = advance(prob, s0, prev2_u=s0.u - 0.02 * s0.v)
        assert_array_equal(a.u, b.u)
        assert_array_equal(a.theta, b.theta)


class TestRun:
    def test_single_step(self):
        prob = small_problem(n_cells=2, tau=0.1, t_end=0.1)
        traj = run(prob, rest_state(prob))
        assert len(traj.states) == 2 and len(traj.ledger) == 1 and len(traj.infos) == 1

    def test_constant_trajectory(self):
        prob = small_problem(n_cells=4, tau=0.05, t_end=0.25, rho=1e-3)
        traj = run(prob, rest_state(prob))
        for s in traj.states[1:]:
            assert_allclose(s.u, 0.0, atol=1e-14)
            assert_allclose(s.theta, 1.0, rtol=1e-13)
        assert_allclose(traj.times, np.linspace(0, 0.25, 6))

    def test_non_integer_horizon(self):
        prob = small_problem(n_cells=2, tau=0.3, t_end=1.0)
        with pytest.raises(InvalidArgument, match="integer multiple"):
            run(prob, rest_state(prob))

    def test_strict_rejects_large_step(self):
        mesh = interval_mesh(2, 1.0)
        from fracstep.stepper import Problem

        model = make_model("regular_solution", C=1.0, lam=0.0, G=0.0, B_mix=4.0)
        prob = Problem(mesh, model, BoundaryData(), SchemeParams(tau=0.1, t_end=0.2, strict=True, pin_dofs=((0, 0),)))
        assert prob.tau_admissible == pytest.approx(1 / 16)
        with pytest.raises(ConsistencyFailure) as err:
            run(prob, rest_state(prob, chi0=0.5, c0=0.5))
        assert err.value.invariant == "tau_admissible"
        assert "1/M^2" in str(err.value)

    def test_nonstrict_flags_nonconvex_regime(self):
        mesh = interval_mesh(2, 1.0)
        from fracstep.stepper import Problem

        model = make_model("regular_solution", C=1.0, lam=0.0, G=0.0, B_mix=4.0)
        prob = Problem(mesh, model, BoundaryData(), SchemeParams(tau=0.1, t_end=0.1, pin_dofs=((0, 0),)))
        traj = run(prob, rest_state(prob, chi0=0.5, c0=0.5))
        assert traj.nonconvex_regime

    def test_strict_rejects_unstable_initial_damage(self):
        mesh = interval_mesh(2, 1.0)
        from fracstep.stepper import Problem

        model = make_model("hydride", C=1.0, lam=0.0, G=0.0, alpha0=0.1, eps_sw=0.0)
        prob = Problem(mesh, model, BoundaryData(), SchemeParams(tau=0.1, t_end=0.1, strict=True, pin_dofs=((0, 0),)))
        s0 = rest_state(prob, u0=[[0.0], [1.0], [2.0]])
        with pytest.raises(ConsistencyFailure) as err:
            run(prob, s0)
        assert err.value.invariant == "semistability"

    def test_quasistatic_needs_pinning(self):
        with pytest.raises(InvalidArgument, match="rigid"):
            small_problem(n_cells=2, pins=(), quasistatic=True, rho=1.0)

    def test_quasistatic_rejects_strain_dependent_rate(self):
        from dataclasses import dataclass, field

        from fracstep.materials import HydrideModel

        @dataclass(frozen=True)
        class StrainRate(HydrideModel):
            zeta_depends_on_E = True
            name: str = field(default="strain_rate", init=False)

        from fracstep.stepper import Problem

        with pytest.raises(InvalidArgument, match="quasistatic"):
            Problem(interval_mesh(2, 1.0), StrainRate(), BoundaryData(),
                    SchemeParams(tau=0.1, t_end=0.1, quasistatic=True, pin_dofs=((0, 0),)))

    def test_progress_callback(self):
        prob = small_problem(n_cells=2, tau=0.1, t_end=0.3)
        calls = []
        run(prob, rest_state(prob), progress=lambda k, n, s: calls.append((k, n, s.t)))
        assert [c[:2] for c in calls] == [(1, 3), (2, 3), (3, 3)]

    def test_deterministic(self):
        bc = BoundaryData(h_surf=lambda t: np.array([0.2, 0.0]))
        prob = small_problem(n_cells=8, tau=0.01, t_end=0.05, bc=bc, eps_sw=0.1, rho=1e-3, viscosity=0.01, C=5.0)
        s0 = rest_state(prob, chi0=0.3, c0=0.3)
        a, b = run(prob, s0), run(prob, s0)
        for x, y in zip(a.states, b.states):
            for f in x.FIELDS:
                assert_array_equal(getattr(x, f), getattr(y, f))
