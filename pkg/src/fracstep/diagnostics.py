"""Energy ledger, invariant checks, semistability and refinement studies.

All quantities are recomputed from pairs of consecutive states, so the
checks are independent of the solver internals.

Energy scale: relative tolerances on energy residuals are measured against
``max(1, |E_MC(0)|, sum of |work| so far)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .materials import MaterialModel
from .reports import CheckReport
from .stepper import (
    Problem,
    State,
    delayed_args,
    heat_sources_fixed,
    mobility_matrix,
)

LEDGER_COLUMNS = (
    "t",
    "E_MC",
    "E_therm",
    "E_TOT",
    "diss_viscous",
    "diss_phase",
    "diss_slack",
    "diss_adiabatic",
    "diss_damage",
    "diss_diffusive",
    "heat_viscous",
    "heat_diffusive",
    "heat_adiabatic",
    "damage_heat_min",
    "work_mech",
    "work_chem",
    "work_therm",
    "step_inequality_residual",
    "inequality_residual",
    "total_balance_residual",
    "cumulative_balance_residual",
    "scale",
)


@dataclass
class EnergyLedgerRow:
    """Energy bookkeeping of one step ``k-1 -> k``.

    Dissipation entries are the amounts dissipated during the step (already
    multiplied by ``tau``). ``diss_slack`` is the semiconvexity allowance
    ``tau^(3/2) sum m |chi_rate|^2``, subtracted on the dissipation side.
    ``diss_adiabatic`` is the exchange term with the delayed temperature used
    by the mechanical step. ``step_inequality_residual`` is

        E_MC(k) - E_MC(k-1) + (dissipation - slack) - (mechanical + chemical work)

    and must be <= 0 up to solver tolerance; ``inequality_residual`` is its
    running sum. ``total_balance_residual`` is the increment of the total
    energy minus all external work during the step.
    """

    t: float
    E_MC: float
    E_therm: float
    E_TOT: float
    diss_viscous: float
    diss_phase: float
    diss_slack: float
    diss_adiabatic: float
    diss_damage: float
    diss_diffusive: float
    heat_viscous: float
    heat_diffusive: float
    heat_adiabatic: float
    damage_heat_min: float
    work_mech: float
    work_chem: float
    work_therm: float
    step_inequality_residual: float
    inequality_residual: float = 0.0
    total_balance_residual: float = 0.0
    cumulative_balance_residual: float = 0.0
    scale: float = 1.0

    @property
    def dissipation(self) -> float:
        return (
            self.diss_viscous
            + self.diss_phase
            - self.diss_slack
            + self.diss_adiabatic
            + self.diss_damage
            + self.diss_diffusive
        )

    def as_list(self):
        return [getattr(self, c) for c in LEDGER_COLUMNS]


def mech_chem_energy(problem: Problem, state: State) -> float:
    """Stored mechanical and chemical energy including kinetic and gradient terms."""
    mesh, model = problem.mesh, problem.model
    E = state.E_e.reshape(-1, mesh.nsym)
    phi = model.phi_mech(E, problem.quad(state.chi), problem.quad(state.d)).value
    val = float(np.sum(mesh.qweights.reshape(-1) * phi))
    val += float(np.sum(problem.m * model.phi_chem(state.chi, state.c).value))
    if problem.rho:
        val += 0.5 * problem.rho * float(np.sum(state.v * (problem.mass @ state.v)))
    L = problem.laplace
    val += 0.5 * model.kappa1 * float(np.sum(state.chi * (L @ state.chi)))
    val += 0.5 * model.kappa2 * float(state.d @ (L @ state.d))
    return val


def thermal_energy(problem: Problem, state: State) -> float:
    return float(np.sum(problem.m * state.w))


def total_energy(problem: Problem, state: State) -> float:
    return mech_chem_energy(problem, state) + thermal_energy(problem, state)


def ledger_step(problem: Problem, prev: State, next: State, scale: float | None = None) -> EnergyLedgerRow:
    """Energy ledger of one step, recomputed from the two states."""
    mesh, model, m = problem.mesh, problem.model, problem.m
    tau = next.t - prev.t
    if not tau > 0:
        tau = problem.params.tau
    loads = problem.loads(next.t)
    E0, E1 = mech_chem_energy(problem, prev), mech_chem_energy(problem, next)
    W0, W1 = thermal_energy(problem, prev), thermal_energy(problem, next)

    w_q = mesh.qweights.reshape(-1)
    Edot = (next.E_e - prev.E_e).reshape(-1, mesh.nsym) / tau
    D = problem.D
    dvisc = tau * float(np.sum(w_q * np.einsum("ps,st,pt->p", Edot, D, Edot)))

    chi_rate = (next.chi - prev.chi) / tau
    a, b = model.zeta_coeffs(*delayed_args("step1", "zeta", problem.level(prev, "nodes"), {}))
    a = np.where(np.isfinite(a), a, 0.0)
    dphase = tau * float(np.sum(m * (a * np.abs(chi_rate).sum(axis=1) + 2 * b * np.sum(chi_rate**2, axis=1))))
    slack = tau * math.sqrt(tau) * float(np.sum(m * np.sum(chi_rate**2, axis=1)))
    g_prev = model.dchi_phi_term(*delayed_args("step1", "dchi_phi_term", problem.level(prev, "nodes"), {}))
    dadiab = tau * float(np.sum(m * np.sum(g_prev * chi_rate, axis=1)))
    alpha = model.alpha(next.chi)[0]
    dheat = -m * alpha * (next.d - prev.d) / tau
    ddam = float(np.sum(m * alpha * (prev.d - next.d)))
    A_M = mobility_matrix(problem, prev, next.chi, next.E_e)
    ddiff = tau * float(next.mu @ (A_M @ next.mu))

    phase, damage, visc, diff, boundary = heat_sources_fixed(
        problem, prev, next.chi, next.E_e, next.mu, next.d, tau, loads
    )
    g_cur = model.dchi_phi_term(next.chi, next.theta)
    heat_adiab = tau * float(np.sum(m * np.sum(g_cur * chi_rate, axis=1)))

    wm = float(loads["F"] @ (next.u - prev.u).reshape(-1))
    wc = tau * float(loads["b_h"] @ next.mu)
    wt = tau * float(np.sum(loads["b_q"]))

    row = EnergyLedgerRow(
        t=next.t,
        E_MC=E1,
        E_therm=W1,
        E_TOT=E1 + W1,
        diss_viscous=dvisc,
        diss_phase=dphase,
        diss_slack=slack,
        diss_adiabatic=dadiab,
        diss_damage=ddam,
        diss_diffusive=ddiff,
        heat_viscous=tau * float(np.sum(visc)),
        heat_diffusive=tau * float(np.sum(diff)),
        heat_adiabatic=heat_adiab,
        damage_heat_min=float(dheat.min()),
        work_mech=wm,
        work_chem=wc,
        work_therm=wt,
        step_inequality_residual=0.0,
    )
    row.step_inequality_residual = (E1 - E0) + row.dissipation - (wm + wc)
    row.total_balance_residual = (E1 + W1) - (E0 + W0) - (wm + wc + wt)
    row.inequality_residual = row.step_inequality_residual
    row.cumulative_balance_residual = row.total_balance_residual
    row.scale = scale if scale is not None else max(1.0, abs(E0), abs(wm) + abs(wc) + abs(wt))
    return row


def inequality_check(row: EnergyLedgerRow, rel_tol: float = 1e-8) -> CheckReport:
    worst = max(row.step_inequality_residual, row.inequality_residual)
    tol = rel_tol * row.scale
    return CheckReport(
        "energy_inequality",
        worst <= tol,
        tol,
        worst,
        {"t": row.t, "step": row.step_inequality_residual, "cumulative": row.inequality_residual},
    )


def _damage_functional(problem: Problem, state: State, d_trial: np.ndarray, batch: int = 250) -> np.ndarray:
    """``int phi_mech(E, chi, d) + kappa2/2 |grad d|^2`` for a batch of profiles (T, n_nodes)."""
    mesh, model = problem.mesh, problem.model
    E = state.E_e.reshape(-1, mesh.nsym)
    chi_q = problem.quad(state.chi)
    w_q = mesh.qweights.reshape(-1)
    P = len(w_q)
    Nq = mesh.quadrature[0]
    L = problem.laplace
    out = np.empty(len(d_trial))
    for s in range(0, len(d_trial), batch):
        dt = d_trial[s : s + batch]
        T = len(dt)
        dq = np.einsum("qa,tca->tcq", Nq, dt[:, mesh.cells]).reshape(-1)
        phi = model.phi_mech(np.tile(E, (T, 1)), np.tile(chi_q, (T, 1)), dq).value.reshape(T, P)
        grad = 0.5 * model.kappa2 * np.einsum("ti,ti->t", dt, (L @ dt.T).T)
        out[s : s + T] = phi @ w_q + grad
    return out


def check_semistability(problem: Problem, state: State, n_trials: int = 1000, rng_seed=0,
                        scale: float | None = None, rel_tol: float = 1e-9) -> CheckReport:
    """Random test of the damage semistability inequality.

    For competitors ``0 <= dt <= d`` checks
    ``F(d) <= F(dt) + sum m alpha(chi) (d - dt)`` with ``F`` the stored
    energy in ``d``. Competitors come in three families of uniform nodal
    noise: amplitudes 1e-3 and 1e-1 around ``d`` and the full range.
    """
    rng = np.random.default_rng(rng_seed)
    d = state.d
    if scale is None:
        scale = max(1.0, abs(mech_chem_energy(problem, state)))
    tol = rel_tol * scale
    if n_trials <= 0 or not np.any(d > 0):
        return CheckReport("semistability", True, tol, 0.0, {}, "empty competitor set")
    n = len(d)
    fams = []
    per = [n_trials // 3 + (1 if i < n_trials % 3 else 0) for i in range(3)]
    for amp, k in zip((1e-3, 1e-1), per[:2]):
        fams.append(np.clip(d + amp * rng.uniform(-1.0, 1.0, (k, n)), 0.0, d))
    fams.append(rng.uniform(0.0, 1.0, (per[2], n)) * d)
    trials = np.concatenate(fams)
    alpha = problem.model.alpha(state.chi)[0]
    F0 = _damage_functional(problem, state, d[None])[0]
    Ft = _damage_functional(problem, state, trials)
    margin = Ft + (trials @ -(problem.m * alpha) + float(np.sum(problem.m * alpha * d))) - F0
    i = int(np.argmin(margin))
    node = int(np.argmax(np.abs(trials[i] - d)))
    return CheckReport(
        "semistability",
        bool(margin[i] >= -tol),
        tol,
        float(margin[i]),
        {"trial": i, "node": node, "d": float(d[node]), "d_trial": float(trials[i, node])},
        f"{len(trials)} competitors",
    )


def conservation_suite(problem: Problem, prev: State, next: State) -> list:
    """Mass, enthalpy, positivity, damage monotonicity and box constraints for one step."""
    model, m = problem.model, problem.m
    tau = next.t - prev.t
    loads = problem.loads(next.t)
    out = []

    dm = float(np.sum(m * (next.c - prev.c))) - tau * float(np.sum(loads["b_h"]))
    tol_m = 1e-10 * (1.0 + float(np.sum(m * np.abs(next.c))))
    out.append(CheckReport("solute_mass", abs(dm) <= tol_m, tol_m, dm, {"t": next.t}))

    phase, damage, visc, diff, boundary = heat_sources_fixed(
        problem, prev, next.chi, next.E_e, next.mu, next.d, tau, loads
    )
    chi_rate = (next.chi - prev.chi) / tau
    adiab = m * np.sum(model.dchi_phi_term(next.chi, next.theta) * chi_rate, axis=1)
    rhs = tau * float(np.sum(phase + damage + visc + diff + boundary + adiab))
    dw = float(np.sum(m * (next.w - prev.w))) - rhs
    tol_w = 1e-9 * max(1.0, float(np.sum(m * np.abs(next.w))))
    out.append(CheckReport("enthalpy", abs(dw) <= tol_w, tol_w, dw, {"t": next.t}))

    i = int(np.argmin(next.theta))
    out.append(
        CheckReport(
            "theta_nonnegative",
            bool(next.theta[i] >= -1e-12),
            1e-12,
            float(next.theta[i]),
            {"node": i, "t": next.t},
        )
    )
    inc = next.d - prev.d
    i = int(np.argmax(inc))
    out.append(
        CheckReport(
            "damage_monotone",
            bool(np.all(inc <= 0)),
            0.0,
            float(inc[i]),
            {"node": i, "d_prev": float(prev.d[i]), "d": float(next.d[i])},
        )
    )
    i = int(np.argmin(np.minimum(next.d, 1.0 - next.d)))
    out.append(
        CheckReport(
            "damage_range",
            bool(np.all((next.d >= 0) & (next.d <= 1))),
            0.0,
            float(min(next.d.min(), 1 - next.d.max())),
            {"node": i},
        )
    )
    lo, hi = model.chi_box
    viol = np.maximum(lo - next.chi, next.chi - hi)
    i = int(np.argmax(viol.max(axis=1)))
    out.append(
        CheckReport(
            "chi_in_box",
            bool(np.all(viol <= 0)),
            0.0,
            float(viol.max()),
            {"node": i, "chi": next.chi[i]},
        )
    )
    return out


# ---------------------------------------------------------------------------
# derivative verification
# ---------------------------------------------------------------------------


def gradient_check(model: MaterialModel, n_points: int = 100, rng_seed=0, h: float = 1e-6,
                   tol: float = 1e-5) -> CheckReport:
    """Compare analytic first and second derivatives with central differences.

    The error measure is ``|analytic - fd| / max(1, |analytic|)``.
    """
    rng = np.random.default_rng(rng_seed)
    P = n_points
    lo, hi = model.chi_box
    span = hi - lo
    E = rng.uniform(-1.0, 1.0, (P, model.nsym))
    chi = rng.uniform(lo + 0.1 * span, hi - 0.1 * span, (P, model.N))
    d = rng.uniform(0.05, 0.95, P)
    c = rng.uniform(-1.0, 1.0, P)
    theta = rng.uniform(0.5, 5.0, P)
    worst = {"err": 0.0, "what": ""}

    def cmp(what, analytic, fd):
        analytic = np.asarray(analytic, dtype=float)
        err = np.abs(analytic - fd) / np.maximum(1.0, np.abs(analytic))
        e = float(np.max(err)) if err.size else 0.0
        if not np.isfinite(e):
            e = np.inf
        if e > worst["err"] or not worst["what"]:
            worst.update(err=e, what=what)

    def fd_vec(f, x, k):
        xp, xm = x.copy(), x.copy()
        xp[:, k] += h
        xm[:, k] -= h
        return (f(xp) - f(xm)) / (2 * h)

    def fd_s(f, x):
        return (f(x + h) - f(x - h)) / (2 * h)

    me = model.phi_mech(E, chi, d)
    hs = model.phi_mech_hessian(E, chi, d)
    for k in range(model.nsym):
        cmp(f"phi_mech.dE[{k}]", me.dE[:, k], fd_vec(lambda x: model.phi_mech(x, chi, d).value, E, k))
        cmp(f"phi_mech.EE[:, {k}]", hs.EE[:, :, k], _fd_cols(lambda x: model.phi_mech(x, chi, d).dE, E, k, h))
        cmp(f"phi_mech.Ed via E[{k}]", hs.Ed[:, k], fd_vec(lambda x: model.phi_mech(x, chi, d).dd, E, k))
    for k in range(model.N):
        cmp(f"phi_mech.dchi[{k}]", me.dchi[:, k], fd_vec(lambda x: model.phi_mech(E, x, d).value, chi, k))
        cmp(f"phi_mech.Echi[:, {k}]", hs.Echi[:, :, k], _fd_cols(lambda x: model.phi_mech(E, x, d).dE, chi, k, h))
        cmp(f"phi_mech.chichi[:, {k}]", hs.chichi[:, :, k], _fd_cols(lambda x: model.phi_mech(E, x, d).dchi, chi, k, h))
    cmp("phi_mech.dd", me.dd, fd_s(lambda x: model.phi_mech(E, chi, x).value, d))
    cmp("phi_mech.ddd", hs.dd, fd_s(lambda x: model.phi_mech(E, chi, x).dd, d))
    cmp("phi_mech.chid", hs.chid, (model.phi_mech(E, chi, d + h).dchi - model.phi_mech(E, chi, d - h).dchi) / (2 * h))

    ch = model.phi_chem(chi, c)
    cmp("phi_chem.dc", ch.dc, fd_s(lambda x: model.phi_chem(chi, x).value, c))
    cmp("phi_chem.dcc", ch.dcc, fd_s(lambda x: model.phi_chem(chi, x).dc, c))
    for k in range(model.N):
        cmp(f"phi_chem.dchi[{k}]", ch.dchi[:, k], fd_vec(lambda x: model.phi_chem(x, c).value, chi, k))
        cmp(f"phi_chem.dchic[{k}]", ch.dchic[:, k], fd_vec(lambda x: model.phi_chem(x, c).dc, chi, k))
        cmp(f"phi_chem.dchichi[:, {k}]", ch.dchichi[:, :, k], _fd_cols(lambda x: model.phi_chem(x, c).dchi, chi, k, h))

    te = model.phi_term(chi, theta)
    cmp("phi_term.dtheta", te.dtheta, fd_s(lambda x: model.phi_term(chi, x).value, theta))
    cmp("phi_term.dthetatheta", te.dthetatheta, fd_s(lambda x: model.phi_term(chi, x).dtheta, theta))
    cmp("phi_term.dchitheta", te.dchitheta, (model.phi_term(chi, theta + h).dchi - model.phi_term(chi, theta - h).dchi) / (2 * h))
    for k in range(model.N):
        cmp(f"phi_term.dchi[{k}]", te.dchi[:, k], fd_vec(lambda x: model.phi_term(x, theta).value, chi, k))
    cmp("e_term", model.e_term(chi, theta), te.value - theta * te.dtheta)
    cmp("heat_capacity", model.heat_capacity(chi, theta), fd_s(lambda x: model.e_term(chi, x), theta))

    al, dal = model.alpha(chi)
    for k in range(model.N):
        cmp(f"alpha.grad[{k}]", dal[:, k], fd_vec(lambda x: model.alpha(x)[0], chi, k))

    return CheckReport(
        f"gradient_check[{model.name}]",
        worst["err"] <= tol,
        tol,
        worst["err"],
        {"worst": worst["what"]},
        f"{n_points} points",
    )


def _fd_cols(f, x, k, h):
    xp, xm = x.copy(), x.copy()
    xp[:, k] += h
    xm[:, k] -= h
    return (f(xp) - f(xm)) / (2 * h)


# ---------------------------------------------------------------------------
# time-step refinement
# ---------------------------------------------------------------------------


@dataclass
class RefinementRow:
    tau: float
    tau_fine: float
    diff_u: float
    diff_chi: float
    diff_c: float
    diff_theta: float


def trajectory_difference(problem_coarse: Problem, traj_coarse, traj_fine, name: str) -> float:
    """Discrete L2(Q) distance between two trajectories at the coarse time levels."""
    m = problem_coarse.m
    tau = problem_coarse.params.tau
    times_f = np.array([s.t for s in traj_fine.states])
    total = 0.0
    for s in traj_coarse.states[1:]:
        j = int(np.argmin(np.abs(times_f - s.t)))
        if abs(times_f[j] - s.t) > 1e-9 * max(1.0, s.t):
            raise DomainError("fine trajectory does not contain the coarse time levels")
        diff = np.asarray(getattr(s, name) - getattr(traj_fine.states[j], name))
        diff = diff.reshape(len(m), -1)
        total += tau * float(np.sum(m[:, None] * diff**2))
    return math.sqrt(total)


def convergence_study(build, tau_list) -> list:
    """Successive differences between runs with the step sizes in ``tau_list``.

    ``build(tau)`` must return ``(problem, initial_state)``. Returns one
    :class:`RefinementRow` per consecutive pair (empty for one step size).
    """
    from .stepper import run

    taus = list(tau_list)
    if any(b >= a for a, b in zip(taus, taus[1:])):
        raise ValueError("tau_list must be strictly decreasing")
    runs = []
    for tau in taus:
        problem, init = build(tau)
        runs.append((problem, run(problem, init)))
    rows = []
    for (pc, tc), (pf, tf) in zip(runs, runs[1:]):
        rows.append(
            RefinementRow(
                pc.params.tau,
                pf.params.tau,
                *(trajectory_difference(pc, tc, tf, n) for n in ("u", "chi", "c", "theta")),
            )
        )
    return rows


def observed_orders(rows, name: str) -> list:
    """``log2`` of successive difference ratios for one field (assuming halving)."""
    vals = [getattr(r, f"diff_{name}") for r in rows]
    out = []
    for a, b, r in zip(vals, vals[1:], rows):
        ratio = r.tau / r.tau_fine
        out.append(math.log(a / b) / math.log(ratio) if a > 0 and b > 0 else float("nan"))
    return out


__all__ = [
    "LEDGER_COLUMNS",
    "EnergyLedgerRow",
    "mech_chem_energy",
    "thermal_energy",
    "total_energy",
    "ledger_step",
    "inequality_check",
    "check_semistability",
    "conservation_suite",
    "gradient_check",
    "convergence_study",
    "trajectory_difference",
    "observed_orders",
    "RefinementRow",
]
