"""Acceptance criteria A1-A10.

Each test records one ``A<n> PASS|FAIL`` line; the lines are printed as they
are produced (visible with ``-s``) and repeated in the terminal summary.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from fracstep.cli import build, load_scenario, main_run, parse_config, scenario_names, scenario_text
from fracstep.diagnostics import convergence_study, gradient_check, observed_orders
from fracstep.materials import BUILTIN_MODELS, make_model
from fracstep.minimizers import brute_force_min
from fracstep.stepper import run, tau_admissible
from test_stepper import (
    GRID,
    random_step1_instance,
    random_step2_instance,
    random_step3_instance,
    random_step4_instance,
    run_step1_instance,
    run_step2_instance,
    run_step3_instance,
    run_step4_instance,
    step1_oracle,
    step2_oracle_matrix,
    step3_oracle,
    step4_oracle,
)

RESULTS = {}
N_ORACLE = 50


def record(key, ok, detail):
    line = f"{key} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS[key] = line
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def runs():
    out = {}
    for name in scenario_names():
        cfg = load_scenario(name)
        problem, init = build(cfg)
        t0 = time.perf_counter()
        traj = run(problem, init, max(cfg.semistability_trials, 1000), cfg.rng_seed, checks=True)
        out[name] = (problem, traj, time.perf_counter() - t0)
    return out


def test_A1_energy_inequality(runs):
    problem, traj, elapsed = runs["hydride_flagship"]
    rows = traj.ledger
    worst = max(r.inequality_residual / r.scale for r in rows)
    worst_step = max(r.step_inequality_residual / r.scale for r in rows)
    dmg = [k for k, r in enumerate(rows) if r.diss_damage > 0]
    mid = bool(dmg) and 0 < dmg[0] < len(rows) - 1
    ok = (len(rows) == 200 and problem.mesh.n_cells == 64 and problem.params.tau == 0.005
          and max(worst, worst_step) <= 1e-8 and mid and elapsed < 60)
    record("A1", ok, f"max residual/scale {max(worst, worst_step):.2e}, damage from step "
                     f"{dmg[0] + 1 if dmg else None}, runtime {elapsed:.1f} s")


def test_A2_total_energy_balance(runs):
    _, traj, _ = runs["hydride_flagship"]
    rel = [abs(r.total_balance_residual) / r.scale for r in traj.ledger]
    dmg = [k for k, r in enumerate(traj.ledger) if r.diss_damage > 0]
    worst_dmg = max((rel[k] for k in dmg), default=0.0)
    ok = max(rel) <= 1e-6 and bool(dmg)
    record("A2", ok, f"max |balance|/scale {max(rel):.2e} ({len(dmg)} damage steps, worst {worst_dmg:.2e})")


def test_A3_positivity_and_constraints(runs):
    bad = []
    for name, (problem, traj, _) in runs.items():
        lo, hi = problem.model.chi_box
        for s in traj.states:
            if not (np.all(s.theta >= -1e-12) and np.all((s.d >= 0) & (s.d <= 1))
                    and np.all((s.chi >= lo) & (s.chi <= hi))):
                bad.append((name, s.t))
    min_theta = min(float(min(s.theta.min() for s in t.states)) for _, t, _ in runs.values())
    record("A3", not bad, f"{len(runs)} scenarios, min theta {min_theta:.3g}, violations {bad[:3]}")


def test_A4_damage_monotone(runs):
    bad = []
    for name, (problem, traj, _) in runs.items():
        for a, b in zip(traj.states, traj.states[1:]):
            if np.any(b.d > a.d):
                bad.append((name, b.t, "d increased"))
        for r in traj.ledger:
            if r.damage_heat_min < 0:
                bad.append((name, r.t, "damage heat"))
    record("A4", not bad, f"{len(runs)} scenarios, violations {bad[:3]}")


def test_A5_solute_mass(runs):
    worst, bad, fluxes = 0.0, [], set()
    for name, (problem, traj, _) in runs.items():
        m = problem.m
        for a, b in zip(traj.states, traj.states[1:]):
            bh = problem.loads(b.t)["b_h"]
            fluxes.add(bool(np.any(bh != 0)))
            err = abs(float(np.sum(m * (b.c - a.c))) - (b.t - a.t) * float(np.sum(bh)))
            tol = 1e-10 * (1 + float(np.sum(m * np.abs(b.c))))
            worst = max(worst, err / tol)
            if err > tol:
                bad.append((name, b.t))
    ok = not bad and fluxes == {True, False}
    record("A5", ok, f"worst error/tolerance {worst:.2e}, zero and nonzero influx covered: {fluxes == {True, False}}")


def test_A6_semistability(runs):
    n_checked, bad = 0, []
    for name, (problem, traj, _) in runs.items():
        if not traj.initial_semistability.passed:
            bad.append((name, 0.0))
        for reps in traj.checks:
            for r in reps:
                if r.name == "semistability":
                    n_checked += 1
                    if not r.passed:
                        bad.append((name, r.witness))
    record("A6", not bad and n_checked > 0, f"{n_checked} checked steps x 1000 competitors, violations {bad[:3]}")


def test_A7_oracle_equivalence():
    h = 1.0 / (GRID - 1)
    fails = {1: 0, 2: 0, 3: 0, 4: 0}
    rng = np.random.default_rng(2024)
    for _ in range(N_ORACLE):
        P, tau, chi_prev, c, d = random_step1_instance(rng)
        x = run_step1_instance(P, tau, chi_prev, c, d)
        xb, _ = brute_force_min(step1_oracle(P, chi_prev, c, d, tau), [0, 0], [1, 1], GRID)
        fails[1] += bool(np.any(np.abs(x - xb) > h + 1e-12))

        P, tau, chi, c_prev, hs = random_step2_instance(rng)
        _, mu = run_step2_instance(P, tau, chi, c_prev, hs)
        H, m, b = step2_oracle_matrix(P, tau, hs)
        lin = m * (c_prev - chi) / tau + b
        R = 5.0
        mb, _ = brute_force_min(lambda X: 0.5 * np.einsum("pi,ij,pj->p", X, H, X) - X @ lin, [-R, -R], [R, R], GRID)
        fails[2] += bool(np.any(np.abs(mu - mb) > 2 * R / (GRID - 1) + 1e-12))

        P, E, d_prev = random_step3_instance(rng)
        d3 = run_step3_instance(P, E, d_prev)
        db, _ = brute_force_min(step3_oracle(P, E, d_prev), [0, 0], d_prev, GRID)
        fails[3] += bool(np.any(np.abs(d3 - db) > d_prev / (GRID - 1) + 1e-12))

        args = random_step4_instance(rng)
        theta, _, _ = run_step4_instance(*args)
        H, rhs = step4_oracle(*args)
        top = 6.0
        tb, _ = brute_force_min(lambda X: 0.5 * np.einsum("pi,ij,pj->p", X, H, X) - X @ rhs, [0, 0], [top, top], GRID)
        fails[4] += bool(np.any(np.abs(theta - tb) > top / (GRID - 1) + 1e-12))
    record("A7", not any(fails.values()), f"{N_ORACLE} instances per step, mismatches per step {fails}")


def test_A8_derivative_contract():
    models = [make_model(n) for n in BUILTIN_MODELS] + [
        make_model("hydride", dim=2),
        make_model("poroelastic_regularized", dim=2),
    ]
    reps = [gradient_check(m) for m in models]
    worst = max(r.value for r in reps)
    record("A8", all(r.passed for r in reps), f"{len(reps)} models, worst relative error {worst:.2e}")


def test_A9_tau_refinement():
    cfg = load_scenario("hydride_flagship")
    taus = [0.02, 0.01, 0.005, 0.0025]
    rows = convergence_study(lambda tau: build(cfg, tau), taus)
    detail, ok = [], True
    for name in ("u", "chi", "c", "theta"):
        diffs = [getattr(r, f"diff_{name}") for r in rows]
        ratios = [a / b if b > 0 else np.inf for a, b in zip(diffs, diffs[1:])]
        ok &= all(b < a for a, b in zip(diffs, diffs[1:])) and all(q >= 1.5 for q in ratios)
        detail.append(f"{name} ratios " + "/".join(f"{q:.2f}" for q in ratios))
    heat = load_scenario("linear_heat")
    hrows = convergence_study(lambda tau: build(heat, tau), list(heat.study_taus))
    orders = observed_orders(hrows, "theta")
    ok &= bool(orders) and all(abs(p - 1.0) <= 0.2 for p in orders)
    detail.append("linear heat order " + "/".join(f"{p:.2f}" for p in orders))
    record("A9", ok, "; ".join(detail))


def test_A10_step_size_guard(tmp_path):
    cases = [
        (make_model("hydride", M_semiconvex=2.0, b_rate=0.5), 10.0, 0.25),
        (make_model("hydride", M_semiconvex=0.0, b_rate=0.5), 3.0, 3.0),
        (make_model("hydride", M_semiconvex=1.0, b_rate=10.0), 0.1, 0.1),
        (make_model("hydride", M_semiconvex=0.5, b_rate=0.1), 10.0, 4 * 0.1**2),
        (make_model("regular_solution", B_mix=4.0), 1.0, 1 / 16),
    ]
    exact = all(tau_admissible(m, T) == v for m, T, v in cases)
    cfg = parse_config(scenario_text("regular_solution").replace("B_mix = 0.5", "B_mix = 4.0"))
    problem, _ = build(cfg)
    big = 2 * problem.tau_admissible
    msgs = []
    code = main_run(replace(cfg, tau=big, t_end=2 * big), tmp_path, strict=True, log=msgs.append)
    below = main_run(replace(cfg, tau=problem.tau_admissible / 2, t_end=problem.tau_admissible),
                     tmp_path / "ok", strict=True, log=msgs.append)
    ok = exact and code != 0 and below == 0
    record("A10", ok, f"bound exact: {exact}; strict exit above bound {code}, below bound {below}")
