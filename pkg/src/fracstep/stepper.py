"""Four-step fractional time stepping.

Each time level ``k`` is computed from level ``k-1`` by four decoupled
problems solved in sequence:

1. mechanics and phase field: minimize a joint incremental energy in
   ``(u, chi)`` with damage, concentration and temperature frozen at ``k-1``;
2. diffusion: minimize a convex functional of the chemical potential and
   recover the concentration through the Legendre transform;
3. damage: minimize the stored energy minus the toughness term over
   ``0 <= d <= d^{k-1}``;
4. heat: solve the enthalpy balance for ``theta^k`` with all dissipated
   power fed back as heat.

Nodal (lumped-mass) quadrature is used for every term that is not a
gradient or a strain, so constraints on ``chi``, ``d`` and ``theta`` hold
exactly node by node.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import assemble_load, assemble_mass, assemble_weighted_stiffness, facet_load
from .errors import ConsistencyFailure, InvalidArgument, NumericFailure
from .geometry import Mesh, NodalField
from .materials import BoundaryData, MaterialModel
from .minimizers import SolveOptions, projected_newton

# Time level at which each coefficient reads each of its arguments.
# "k" is the level being computed, "k-1" the previous one.
DELAYED_ARGS = {
    "step1": {
        "phi_mech": {"E": "k", "chi": "k", "d": "k-1"},
        "phi_chem": {"chi": "k", "c": "k-1"},
        "zeta": {"E": "k-1", "chi": "k-1", "c": "k-1", "d": "k-1", "theta": "k-1"},
        "dchi_phi_term": {"chi": "k-1", "theta": "k-1"},
    },
    "step2": {
        "mobility": {"E": "k", "chi": "k", "c": "k-1", "d": "k-1", "theta": "k-1"},
        "phi_chem": {"chi": "k", "c": "k"},
    },
    "step3": {
        "phi_mech": {"E": "k", "chi": "k", "d": "k"},
        "alpha": {"chi": "k"},
    },
    "step4": {
        "zeta": {"E": "k-1", "chi": "k-1", "c": "k-1", "d": "k-1", "theta": "k-1"},
        "dchi_phi_term": {"chi": "k", "theta": "k"},
        "alpha": {"chi": "k"},
        "mobility": {"E": "k", "chi": "k", "c": "k-1", "d": "k-1", "theta": "k-1"},
        "conductivity": {"E": "k", "chi": "k", "c": "k", "d": "k", "theta": "k"},
        "e_term": {"chi": "k", "theta": "k"},
    },
}

_ARG_ORDER = {
    "zeta": ("E", "chi", "c", "d", "theta"),
    "mobility": ("E", "chi", "c", "d", "theta"),
    "conductivity": ("E", "chi", "c", "d", "theta"),
    "phi_mech": ("E", "chi", "d"),
    "phi_chem": ("chi", "c"),
    "dchi_phi_term": ("chi", "theta"),
    "alpha": ("chi",),
    "e_term": ("chi", "theta"),
}


def delayed_args(step: str, coeff: str, prev: dict, cur: dict) -> tuple:
    """Pick the arguments of ``coeff`` in ``step`` from the two time levels."""
    table = DELAYED_ARGS[step][coeff]
    return tuple((cur if table[a] == "k" else prev)[a] for a in _ARG_ORDER[coeff])


@dataclass
class State:
    """All fields at one time level.

    Nodal arrays: ``u``, ``v`` (n_nodes, dim); ``chi``, ``sigma_r``
    (n_nodes, N); ``c``, ``mu``, ``d``, ``w``, ``theta`` (n_nodes,).
    ``E_e`` is the elastic strain at quadrature points (n_cells, nq, nsym).
    """

    t: float
    u: np.ndarray
    v: np.ndarray
    chi: np.ndarray
    c: np.ndarray
    mu: np.ndarray
    d: np.ndarray
    w: np.ndarray
    theta: np.ndarray
    sigma_r: np.ndarray
    E_e: np.ndarray

    FIELDS = ("u", "v", "chi", "c", "mu", "d", "w", "theta", "sigma_r")

    def copy(self) -> "State":
        return replace(self, **{f: getattr(self, f).copy() for f in self.FIELDS + ("E_e",)})

    def field(self, name: str) -> NodalField:
        return NodalField.from_array(getattr(self, name))


@dataclass(frozen=True)
class SchemeParams:
    """Time-stepping controls.

    ``pin_dofs`` lists ``(node, component)`` displacement dofs held at their
    initial value. In quasistatic mode inertia and viscosity are dropped and
    the mechanical problem must be made well posed either by pinning or by
    declaring ``equilibrated_loads``.
    """

    tau: float
    t_end: float
    quasistatic: bool = False
    pin_dofs: tuple = ()
    equilibrated_loads: bool = False
    strict: bool = False
    step1: SolveOptions = field(default_factory=lambda: SolveOptions(tol_grad=1e-11, max_iter=200))
    step2: SolveOptions = field(default_factory=lambda: SolveOptions(tol_grad=1e-12, max_iter=100))
    step3: SolveOptions = field(default_factory=lambda: SolveOptions(tol_grad=1e-12, max_iter=200))
    heat_tol: float = 1e-10
    heat_max_iter: int = 50
    step3_starts: int = 1

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidArgument(f"tau must be positive, got {self.tau}")
        if not self.t_end > 0:
            raise InvalidArgument(f"t_end must be positive, got {self.t_end}")
        if self.step3_starts < 1:
            raise InvalidArgument("step3_starts must be >= 1")

    @property
    def n_steps(self) -> int:
        n = round(self.t_end / self.tau)
        if n < 1 or abs(n * self.tau - self.t_end) > 1e-9 * self.t_end:
            raise InvalidArgument(
                f"t_end={self.t_end} is not an integer multiple of tau={self.tau}"
            )
        return int(n)


def tau_admissible(model: MaterialModel, T: float) -> float:
    """Largest step for which the incremental energy estimate holds.

    ``min(1/M^2, T, 4 b_min^2)`` with ``M`` the semiconvexity constant and
    ``b_min`` the lower bound of the quadratic rate coefficient; ``T`` when
    ``M = 0``.
    """
    M = float(model.M_semiconvex)
    if M == 0:
        return float(T)
    return min(1.0 / M**2, float(T), 4.0 * float(model.b_min) ** 2)


class Problem:
    """Mesh, model, loads and scheme parameters with cached operators."""

    def __init__(self, mesh: Mesh, model: MaterialModel, bc: BoundaryData, params: SchemeParams):
        if model.dim != mesh.dim:
            raise InvalidArgument(f"model dim {model.dim} does not match mesh dim {mesh.dim}")
        if params.quasistatic and getattr(model, "zeta_depends_on_E", False):
            raise InvalidArgument("quasistatic mode needs a rate potential that does not depend on the strain")
        self.mesh, self.model, self.bc, self.params = mesh, model, bc, params
        pins = []
        for node, comp in params.pin_dofs:
            if not (0 <= node < mesh.n_nodes and 0 <= comp < mesh.dim):
                raise InvalidArgument(f"pinned dof ({node}, {comp}) out of range")
            pins.append(node * mesh.dim + comp)
        self.pinned = np.array(sorted(set(pins)), dtype=int)
        if self.rho == 0 and len(self.pinned) == 0 and not params.equilibrated_loads:
            raise InvalidArgument(
                "without inertia the displacement is determined only up to rigid motions: "
                "pin dofs or declare equilibrated_loads"
            )

    # effective coefficients (quasistatic mode drops inertia and viscosity)
    @property
    def rho(self) -> float:
        return 0.0 if self.params.quasistatic else float(self.model.rho)

    @cached_property
    def D(self) -> np.ndarray:
        D = self.model.D_visc()
        return np.zeros_like(D) if self.params.quasistatic else D

    @property
    def tau(self) -> float:
        return self.params.tau

    @cached_property
    def tau_admissible(self) -> float:
        return tau_admissible(self.model, self.params.t_end)

    @property
    def nonconvex_regime(self) -> bool:
        return self.params.tau > self.tau_admissible * (1 + 1e-12)

    @cached_property
    def m(self) -> np.ndarray:
        return self.mesh.lumped_mass

    @cached_property
    def mass(self) -> sp.csr_matrix:
        return assemble_mass(self.mesh)

    @cached_property
    def laplace(self) -> sp.csr_matrix:
        return assemble_weighted_stiffness(self.mesh, 1.0)

    @cached_property
    def element_map(self) -> np.ndarray:
        """Map from element dofs ``(u_e, chi_e)`` to ``(E, chi)`` at each quadrature point.

        Shape (n_cells, nq, nsym + N, nv*dim + nv*N).
        """
        mesh, model = self.mesh, self.model
        Nq = mesh.quadrature[0]
        nq, nv = Nq.shape
        ns, N, dim = mesh.nsym, model.N, mesh.dim
        Ec = model.E_coupling()
        P = np.zeros((mesh.n_cells, nq, ns + N, nv * dim + nv * N))
        P[:, :, :ns, : nv * dim] = mesh.strain_matrix[:, None]
        P[:, :, :ns, nv * dim :] = -np.einsum("qa,sn->qsan", Nq, Ec).reshape(nq, ns, nv * N)
        P[:, :, ns:, nv * dim :] = np.einsum("qa,mn->qman", Nq, np.eye(N)).reshape(nq, N, nv * N)
        return P

    @cached_property
    def element_dofs(self) -> np.ndarray:
        mesh, N, dim = self.mesh, self.model.N, self.mesh.dim
        nu = mesh.n_nodes * dim
        cells = mesh.cells
        ud = (cells[:, :, None] * dim + np.arange(dim)).reshape(len(cells), -1)
        cd = (nu + cells[:, :, None] * N + np.arange(N)).reshape(len(cells), -1)
        return np.concatenate([ud, cd], axis=1)

    # -- field helpers ----------------------------------------------------
    def quad(self, nodal: np.ndarray) -> np.ndarray:
        """Interpolate to quadrature points, flattened to (n_cells*nq, ...)."""
        q = self.mesh.at_quadrature(nodal)
        return q.reshape((-1,) + q.shape[2:])

    def strain(self, u: np.ndarray, chi: np.ndarray) -> np.ndarray:
        """Elastic strain at quadrature points, (n_cells, nq, nsym)."""
        eps = self.mesh.strain(u)
        chi_q = self.mesh.at_quadrature(chi)
        return eps[:, None, :] - chi_q @ self.model.E_coupling().T

    def nodal_strain(self, E_q: np.ndarray) -> np.ndarray:
        """Measure-weighted nodal average of a quadrature field, (n_nodes, nsym)."""
        mesh = self.mesh
        cell_avg = np.einsum("cq,cqs->cs", mesh.qweights, E_q)
        out = np.zeros((mesh.n_nodes, E_q.shape[-1]))
        vol = np.zeros(mesh.n_nodes)
        for a in range(mesh.cells.shape[1]):
            np.add.at(out, mesh.cells[:, a], cell_avg)
            np.add.at(vol, mesh.cells[:, a], mesh.cell_measures)
        return out / vol[:, None]

    def loads(self, t: float) -> dict:
        """Boundary data at time ``t`` plus assembled nodal load vectors."""
        raw = self.bc.evaluate(t, self.mesh)
        F = assemble_load(self.mesh, bulk=raw["f_bulk"], surf=raw["f_surf"])
        raw["F"] = np.asarray(F, dtype=float).reshape(-1)
        raw["b_h"] = facet_load(self.mesh, raw["h_surf"])
        raw["b_q"] = facet_load(self.mesh, raw["q_surf"])
        return raw

    def scatter_quad(self, values: np.ndarray) -> np.ndarray:
        """``sum_q w_q f_q phi_a(x_q)`` assembled to nodes; ``values`` is (n_cells, nq)."""
        mesh = self.mesh
        Nq = mesh.quadrature[0]
        loc = np.einsum("cq,cq,qa->ca", mesh.qweights, values, Nq)
        out = np.zeros(mesh.n_nodes)
        np.add.at(out, mesh.cells, loc)
        return out

    def quad_matrix(self, values: np.ndarray) -> sp.csr_matrix:
        """``sum_q w_q f_q phi_a phi_b`` as a sparse matrix."""
        mesh = self.mesh
        Nq = mesh.quadrature[0]
        loc = np.einsum("cq,cq,qa,qb->cab", mesh.qweights, values, Nq, Nq)
        nv = Nq.shape[1]
        rows = np.repeat(mesh.cells, nv, axis=1).ravel()
        cols = np.tile(mesh.cells, (1, nv)).ravel()
        return sp.coo_matrix((loc.ravel(), (rows, cols)), shape=(mesh.n_nodes,) * 2).tocsr()

    def level(self, state: State, where: str = "nodes", **over) -> dict:
        """Argument dictionary of one time level at nodes or quadrature points."""
        fields = {
            "chi": state.chi,
            "c": state.c,
            "d": state.d,
            "theta": state.theta,
        }
        fields.update({k: v for k, v in over.items() if k != "E"})
        E_q = over.get("E", state.E_e)
        if where == "nodes":
            out = dict(fields)
            out["E"] = self.nodal_strain(E_q)
        else:
            out = {k: self.quad(v) for k, v in fields.items()}
            out["E"] = E_q.reshape(-1, E_q.shape[-1])
        return out


def initial_state(problem: Problem, u0=0.0, v0=0.0, chi0=0.0, c0=0.0, d0=1.0, theta0=0.0, t0=0.0) -> State:
    """Build the level-0 state; ``w0 = e_term(chi0, theta0)``, ``mu0 = d_c phi_chem``."""
    mesh, model = problem.mesh, problem.model
    nn, dim, N = mesh.n_nodes, mesh.dim, model.N

    def nodal(x, shape, name):
        a = np.asarray(x, dtype=float)
        try:
            return np.broadcast_to(a, shape).astype(float).copy()
        except ValueError:
            if a.size == np.prod(shape):
                return a.reshape(shape).astype(float).copy()
            raise InvalidArgument(f"initial {name} has shape {a.shape}, expected {shape}") from None

    u = nodal(u0, (nn, dim), "u")
    v = nodal(v0, (nn, dim), "v")
    chi = nodal(chi0, (nn, N), "chi")
    c = nodal(c0, (nn,), "c")
    d = nodal(d0, (nn,), "d")
    theta = nodal(theta0, (nn,), "theta")
    lo, hi = model.chi_box
    errors = []
    if np.any(chi < lo) or np.any(chi > hi):
        errors.append(f"chi0 outside the box [{lo}, {hi}]")
    if np.any(d < 0) or np.any(d > 1):
        errors.append("d0 outside [0, 1]")
    if np.any(theta < 0):
        errors.append("theta0 must be nonnegative")
    if errors:
        raise InvalidArgument("; ".join(errors))
    w = model.e_term(chi, theta)
    mu = model.phi_chem(chi, c).dc
    return State(
        t=float(t0),
        u=u,
        v=v,
        chi=chi,
        c=c,
        mu=mu,
        d=d,
        w=w,
        theta=theta,
        sigma_r=np.zeros((nn, N)),
        E_e=problem.strain(u, chi),
    )


# ---------------------------------------------------------------------------
# Step 1: mechanics and phase field
# ---------------------------------------------------------------------------


@dataclass
class Step1Result:
    u: np.ndarray
    chi: np.ndarray
    E_e: np.ndarray
    sigma_r: np.ndarray
    chi_rate: np.ndarray
    report: object = None


class Step1Objective:
    """Incremental energy of Step 1 as a function of ``x = (u, chi)`` (node-major blocks)."""

    def __init__(self, problem: Problem, prev: State, prev2_u: np.ndarray, loads: dict, tau: float):
        self.p, self.prev, self.tau = problem, prev, tau
        mesh, model = problem.mesh, problem.model
        self.nu = mesh.n_nodes * mesh.dim
        self.N = model.N
        P_prev = problem.level(prev, "quad")
        N_prev = problem.level(prev, "nodes")
        self.d_q = delayed_args("step1", "phi_mech", P_prev, {"E": None, "chi": None})[2]
        self.c_prev = delayed_args("step1", "phi_chem", N_prev, {"chi": None})[1]
        a, b = model.zeta_coeffs(*delayed_args("step1", "zeta", N_prev, {}))
        self.a, self.b = a, b
        self.g_term = model.dchi_phi_term(*delayed_args("step1", "dchi_phi_term", N_prev, {}))
        self.E_prev = prev.E_e.reshape(-1, mesh.nsym)
        self.chi_prev = prev.chi
        self.D = problem.D
        self.F = loads["F"]
        self.u_star = (2.0 * prev.u - prev2_u).reshape(-1)
        m = problem.m
        # constant quadratic part
        Kchi = sp.kron(problem.laplace, sp.identity(self.N), format="csr") * model.kappa1
        Mu = sp.kron(problem.mass, sp.identity(mesh.dim), format="csr") * (problem.rho / tau**2)
        zb = sp.diags(np.repeat(2.0 * m * b / tau, self.N))
        self.H_const = sp.block_diag([Mu, Kchi + zb], format="csr")

    def split(self, x):
        mesh = self.p.mesh
        return x[: self.nu].reshape(mesh.n_nodes, mesh.dim), x[self.nu :].reshape(mesh.n_nodes, self.N)

    def _quad_state(self, x):
        p = self.p
        xe = x[p.element_dofs]
        y = np.einsum("cqkj,cj->cqk", p.element_map, xe)
        ns = p.mesh.nsym
        E = y[..., :ns].reshape(-1, ns)
        chi = y[..., ns:].reshape(-1, self.N)
        return E, chi

    def value(self, x):
        p, model, tau = self.p, self.p.model, self.tau
        u, chi = self.split(x)
        E, chi_q = self._quad_state(x)
        dE = E - self.E_prev
        psi = model.phi_mech(E, chi_q, self.d_q).value + 0.5 / tau * np.einsum(
            "ps,st,pt->p", dE, self.D, dE
        )
        val = float(np.sum(p.mesh.qweights.reshape(-1) * psi))
        dchi = chi - self.chi_prev
        chem = model.phi_chem(chi, self.c_prev).value
        nod = chem + self.b * np.sum(dchi**2, axis=1) / tau + np.sum(self.g_term * chi, axis=1)
        val += float(np.sum(p.m * nod))
        val += 0.5 * model.kappa1 * float(np.sum(chi * (p.laplace @ chi)))
        if p.rho:
            acc = u.reshape(-1) - self.u_star
            accn = acc.reshape(u.shape)
            val += 0.5 * p.rho / tau**2 * float(np.sum(accn * (p.mass @ accn)))
        val -= float(self.F @ u.reshape(-1))
        return val

    def gradient(self, x):
        p, model, tau = self.p, self.p.model, self.tau
        u, chi = self.split(x)
        E, chi_q = self._quad_state(x)
        me = model.phi_mech(E, chi_q, self.d_q)
        gy = np.concatenate([me.dE + (E - self.E_prev) @ self.D.T / tau, me.dchi], axis=1)
        nc, nq = p.mesh.qweights.shape
        gy = gy.reshape(nc, nq, -1)
        ge = np.einsum("cq,cqkj,cqk->cj", p.mesh.qweights, p.element_map, gy)
        g = np.zeros_like(x)
        np.add.at(g, p.element_dofs, ge)
        gu = np.zeros_like(u)
        if p.rho:
            accn = (u.reshape(-1) - self.u_star).reshape(u.shape)
            gu += p.rho / tau**2 * (p.mass @ accn)
        g[: self.nu] += gu.reshape(-1) - self.F
        ch = model.phi_chem(chi, self.c_prev)
        gchi = p.m[:, None] * (ch.dchi + 2.0 * self.b[:, None] * (chi - self.chi_prev) / tau + self.g_term)
        gchi += model.kappa1 * (p.laplace @ chi)
        g[self.nu :] += gchi.reshape(-1)
        return g

    def hessian(self, x):
        p, model = self.p, self.p.model
        u, chi = self.split(x)
        E, chi_q = self._quad_state(x)
        ns, N = p.mesh.nsym, self.N
        h = model.phi_mech_hessian(E, chi_q, self.d_q)
        K = ns + N
        Hy = np.zeros((len(E), K, K))
        Hy[:, :ns, :ns] = h.EE + self.D / self.tau
        Hy[:, :ns, ns:] = h.Echi
        Hy[:, ns:, :ns] = np.swapaxes(h.Echi, 1, 2)
        Hy[:, ns:, ns:] = h.chichi
        nc, nq = p.mesh.qweights.shape
        Hy = Hy.reshape(nc, nq, K, K)
        He = np.einsum("cq,cqki,cqkl,cqlj->cij", p.mesh.qweights, p.element_map, Hy, p.element_map)
        J = He.shape[1]
        dofs = p.element_dofs
        rows = np.repeat(dofs, J, axis=1).ravel()
        cols = np.tile(dofs, (1, J)).ravel()
        n = x.size
        H = sp.coo_matrix((He.ravel(), (rows, cols)), shape=(n, n)).tocsr()
        ch = model.phi_chem(chi, self.c_prev).dchichi * p.m[:, None, None]
        bd = sp.block_diag(list(ch), format="csr") if N > 1 else sp.diags(ch[:, 0, 0])
        H = H + self.H_const + sp.block_diag([sp.csr_matrix((self.nu, self.nu)), bd], format="csr")
        return ((H + H.T) * 0.5).tocsr()

    def bounds(self):
        p = self.p
        nn = p.mesh.n_nodes
        lo_u = np.full(self.nu, -np.inf)
        hi_u = np.full(self.nu, np.inf)
        pu = self.prev.u.reshape(-1)
        lo_u[p.pinned] = pu[p.pinned]
        hi_u[p.pinned] = pu[p.pinned]
        clo, chi_ = p.model.chi_box
        return (
            np.concatenate([lo_u, np.tile(clo, nn)]),
            np.concatenate([hi_u, np.tile(chi_, nn)]),
        )

    def l1(self):
        nu = self.nu
        w = np.concatenate([np.zeros(nu), np.repeat(self.p.m * self.a, self.N)])
        s = np.concatenate([self.prev.u.reshape(-1), self.chi_prev.reshape(-1)])
        return w, s


def step1_mech_phase(problem: Problem, prev: State, prev2_u: np.ndarray, loads: dict, tau: float) -> Step1Result:
    """Minimize the joint incremental energy for ``(u^k, chi^k)``."""
    obj = Step1Objective(problem, prev, prev2_u, loads, tau)
    x0 = np.concatenate([prev.u.reshape(-1), prev.chi.reshape(-1)])
    lo, hi = obj.bounds()
    w, s = obj.l1()
    x, rep = projected_newton(
        obj.value,
        obj.gradient,
        obj.hessian,
        x0,
        lo,
        hi,
        problem.params.step1,
        l1_weight=w,
        l1_center=s,
    )
    u, chi = obj.split(x)
    lo_c, hi_c = problem.model.chi_box
    chi = np.clip(chi, lo_c, hi_c)
    # multiplier of the box constraint from the reduced gradient
    g = obj.gradient(np.concatenate([u.reshape(-1), chi.reshape(-1)]))
    r = -g[obj.nu :].reshape(chi.shape) / problem.m[:, None]
    a = np.broadcast_to(obj.a[:, None], chi.shape)
    finite = np.isfinite(a)
    sigma = np.zeros_like(chi)
    at_hi = (chi >= hi_c) & finite
    at_lo = (chi <= lo_c) & finite
    sigma[at_hi] = np.maximum(0.0, r[at_hi] - a[at_hi])
    sigma[at_lo] = np.minimum(0.0, r[at_lo] + a[at_lo])
    return Step1Result(
        u=u.copy(),
        chi=chi.copy(),
        E_e=problem.strain(u, chi),
        sigma_r=sigma,
        chi_rate=(chi - prev.chi) / tau,
        report=rep,
    )


# ---------------------------------------------------------------------------
# Step 2: diffusion
# ---------------------------------------------------------------------------


def _conjugate(model, chi, mu, c_guess):
    from .materials import _invert_monotone

    c = _invert_monotone(
        lambda cc: model.phi_chem(chi, cc).dc,
        lambda cc: model.phi_chem(chi, cc).dcc,
        mu,
        1e-14 * max(1.0, float(np.abs(mu).max(initial=0.0))),
        x0=c_guess,
    )
    ch = model.phi_chem(chi, c)
    return mu * c - ch.value, c, ch.dcc


def mobility_matrix(problem: Problem, prev: State, chi_k: np.ndarray, E_k: np.ndarray) -> sp.csr_matrix:
    """Weighted stiffness of the mobility with the delayed arguments of Step 2."""
    mesh = problem.mesh
    cur = problem.level(prev, "quad", E=E_k, chi=chi_k)
    Mq = problem.model.mobility(*delayed_args("step2", "mobility", problem.level(prev, "quad"), cur))
    nc, nq = mesh.qweights.shape
    return assemble_weighted_stiffness(mesh, np.asarray(Mq).reshape(nc, nq, mesh.dim, mesh.dim))


def step2_diffusion(problem: Problem, s1: Step1Result, prev: State, loads: dict, tau: float):
    """Chemical potential from a convex minimization; concentration by Legendre duality."""
    model, m = problem.model, problem.m
    A = mobility_matrix(problem, prev, s1.chi, s1.E_e)
    b = loads["b_h"]
    chi = s1.chi
    cache = {}

    def conj(mu):
        key = mu.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = _conjugate(model, chi, mu, prev.c)
        return cache[key]

    def value(mu):
        phis, _, _ = conj(mu)
        return float(np.sum(m * (phis - prev.c * mu)) / tau + 0.5 * mu @ (A @ mu) - b @ mu)

    def gradient(mu):
        _, c, _ = conj(mu)
        return m * (c - prev.c) / tau + A @ mu - b

    def hessian(mu):
        _, _, dcc = conj(mu)
        return (A + sp.diags(m / (tau * dcc))).tocsr()

    mu0 = model.phi_chem(chi, prev.c).dc
    n = len(mu0)
    mu, rep = projected_newton(
        value, gradient, hessian, mu0, np.full(n, -np.inf), np.full(n, np.inf), problem.params.step2
    )
    _, c, _ = conj(mu)
    return c.copy(), mu.copy(), rep


# ---------------------------------------------------------------------------
# Step 3: damage
# ---------------------------------------------------------------------------


class Step3Objective:
    def __init__(self, problem: Problem, s1: Step1Result, prev: State):
        self.p = problem
        mesh, model = problem.mesh, problem.model
        self.E = s1.E_e.reshape(-1, mesh.nsym)
        self.chi_q = problem.quad(s1.chi)
        (alpha_chi,) = delayed_args("step3", "alpha", {}, {"chi": s1.chi})
        self.alpha = model.alpha(alpha_chi)[0]
        self.kappa2 = model.kappa2

    def value(self, d):
        p = self.p
        dq = p.quad(d)
        v = p.model.phi_mech(self.E, self.chi_q, dq).value
        return float(
            np.sum(p.mesh.qweights.reshape(-1) * v)
            - np.sum(p.m * self.alpha * d)
            + 0.5 * self.kappa2 * d @ (p.laplace @ d)
        )

    def gradient(self, d):
        p = self.p
        dq = p.quad(d)
        dd = p.model.phi_mech(self.E, self.chi_q, dq).dd
        nc, nq = p.mesh.qweights.shape
        return p.scatter_quad(dd.reshape(nc, nq)) - p.m * self.alpha + self.kappa2 * (p.laplace @ d)

    def hessian(self, d):
        p = self.p
        dq = p.quad(d)
        hdd = p.model.phi_mech_hessian(self.E, self.chi_q, dq).dd
        nc, nq = p.mesh.qweights.shape
        return (p.quad_matrix(hdd.reshape(nc, nq)) + self.kappa2 * p.laplace).tocsr()


def step3_damage(problem: Problem, s1: Step1Result, prev: State, tau: float):
    """Minimize the damage functional over ``0 <= d <= d^{k-1}``.

    The iteration starts at ``d^{k-1}``, so a flat objective keeps the old
    profile. With ``step3_starts > 1`` further starts (fully damaged, half
    way) are tried and the lowest objective wins, ties going to the
    earlier start.
    """
    obj = Step3Objective(problem, s1, prev)
    lo = np.zeros_like(prev.d)
    hi = prev.d.copy()
    starts = [hi.copy(), lo.copy(), 0.5 * hi][: problem.params.step3_starts]
    best = None
    for x0 in starts:
        d, rep = projected_newton(
            obj.value, obj.gradient, obj.hessian, x0, lo, hi, problem.params.step3
        )
        f = obj.value(d)
        if best is None or f < best[1] - 1e-14 * max(1.0, abs(best[1])):
            best = (d, f, rep)
    d = np.clip(best[0], lo, hi)
    return d, best[2]


# ---------------------------------------------------------------------------
# Step 4: heat
# ---------------------------------------------------------------------------


@dataclass
class HeatSources:
    """Nodal heat sources (already integrated against the hat functions)."""

    phase: np.ndarray
    damage: np.ndarray
    viscous: np.ndarray
    diffusive: np.ndarray
    adiabatic: np.ndarray
    boundary: np.ndarray

    def total(self) -> np.ndarray:
        return self.phase + self.damage + self.viscous + self.diffusive + self.adiabatic + self.boundary


def heat_sources_fixed(problem: Problem, prev: State, chi_k, E_k, mu_k, d_k, tau, loads):
    """The theta-independent part of the Step-4 right-hand side."""
    mesh, model, m = problem.mesh, problem.model, problem.m
    chi_rate = (chi_k - prev.chi) / tau
    a, b = model.zeta_coeffs(*delayed_args("step4", "zeta", problem.level(prev, "nodes"), {}))
    rate = np.abs(chi_rate).sum(axis=1)
    # a frozen dof (infinite coefficient) does not move and dissipates nothing
    with np.errstate(invalid="ignore"):
        lin = np.where(rate > 0, np.asarray(a, dtype=float) * rate, 0.0)
    phase = m * (lin + 2.0 * b * np.sum(chi_rate**2, axis=1))
    (alpha_chi,) = delayed_args("step4", "alpha", {}, {"chi": chi_k})
    alpha = model.alpha(alpha_chi)[0]
    damage = -m * alpha * (d_k - prev.d) / tau
    nc, nq = mesh.qweights.shape
    Edot = (E_k - prev.E_e).reshape(-1, mesh.nsym) / tau
    D = problem.D
    visc = np.einsum("ps,st,pt->p", Edot, D, Edot) / (1.0 + tau * np.sum(Edot**2, axis=1))
    cur = problem.level(prev, "quad", E=E_k, chi=chi_k)
    Mq = model.mobility(*delayed_args("step4", "mobility", problem.level(prev, "quad"), cur))
    gmu = np.repeat(mesh.gradient(mu_k), nq, axis=0)
    diff = np.einsum("pi,pij,pj->p", gmu, Mq, gmu) / (1.0 + tau * np.sum(gmu**2, axis=1))
    return (
        phase,
        damage,
        problem.scatter_quad(visc.reshape(nc, nq)),
        problem.scatter_quad(diff.reshape(nc, nq)),
        loads["b_q"],
    )


def step4_heat(problem: Problem, prev: State, chi_k, E_k, c_k, mu_k, d_k, loads, tau):
    """Solve the discrete enthalpy balance for ``theta^k``.

    Frozen-coefficient Newton: the conductivity is re-evaluated at the
    current iterate but not differentiated. Converged when the nodal
    residual, measured as an enthalpy, is below ``heat_tol``.
    """
    mesh, model, m = problem.mesh, problem.model, problem.m
    phase, damage, visc, diff, boundary = heat_sources_fixed(
        problem, prev, chi_k, E_k, mu_k, d_k, tau, loads
    )
    fixed = phase + damage + visc + diff + boundary
    chi_rate = (chi_k - prev.chi) / tau
    nc, nq = mesh.qweights.shape
    prev_q = problem.level(prev, "quad")
    theta = prev.theta.copy()
    params = problem.params

    def parts(th):
        cur_q = {
            "E": E_k.reshape(-1, mesh.nsym),
            "chi": problem.quad(chi_k),
            "c": problem.quad(c_k),
            "d": problem.quad(d_k),
            "theta": problem.quad(th),
        }
        Kq = model.conductivity(*delayed_args("step4", "conductivity", prev_q, cur_q))
        AK = assemble_weighted_stiffness(mesh, np.asarray(Kq).reshape(nc, nq, mesh.dim, mesh.dim))
        cur_n = {"chi": chi_k, "theta": th}
        adiab = m * np.sum(model.dchi_phi_term(*delayed_args("step4", "dchi_phi_term", {}, cur_n)) * chi_rate, axis=1)
        e = model.e_term(*delayed_args("step4", "e_term", {}, cur_n))
        R = m * (e - prev.w) / tau + AK @ th - fixed - adiab
        return R, AK, adiab

    for it in range(params.heat_max_iter + 1):
        R, AK, adiab = parts(theta)
        wres = float(np.max(np.abs(R) * tau / m))
        if wres <= params.heat_tol:
            break
        if it == params.heat_max_iter:
            raise NumericFailure(
                f"heat step: frozen Newton did not converge in {params.heat_max_iter} iterations "
                f"(enthalpy residual {wres:.3e})",
                x=theta,
                residual=wres,
                step=4,
            )
        cap = model.heat_capacity(chi_k, theta)
        dadiab = np.sum(model.d2chitheta_phi_term(chi_k, theta) * chi_rate, axis=1)
        J = (AK + sp.diags(m * (cap / tau - dadiab))).tocsc()
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            try:
                theta = theta - spla.spsolve(J, R)
            except Exception as exc:  # singular or ill-conditioned Jacobian
                raise NumericFailure(f"heat step: linear solve failed ({exc})", x=theta, step=4) from exc
    w = model.e_term(chi_k, theta)
    sources = HeatSources(phase, damage, visc, diff, adiab, boundary)
    return theta, w, sources, wres


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


@dataclass
class StepInfo:
    """Solver diagnostics of one time step."""

    k: int
    t: float
    step1_iterations: int
    step2_iterations: int
    step3_iterations: int
    heat_residual: float
    sources: HeatSources


def advance(problem: Problem, prev: State, prev2_u: np.ndarray | None = None, k: int = 0):
    """One full time step. Returns ``(State, StepInfo)``.

    ``prev2_u`` defaults to ``prev.u - tau * prev.v``, which at the first
    step is exactly the start-up value ``u0 - tau v0``.
    """
    tau = problem.params.tau
    t = prev.t + tau
    if prev2_u is None:
        prev2_u = prev.u - tau * prev.v
    loads = problem.loads(t)
    try:
        s1 = step1_mech_phase(problem, prev, prev2_u, loads, tau)
    except NumericFailure as exc:
        exc.step = 1
        raise
    try:
        c, mu, rep2 = step2_diffusion(problem, s1, prev, loads, tau)
    except NumericFailure as exc:
        exc.step = 2
        raise
    try:
        d, rep3 = step3_damage(problem, s1, prev, tau)
    except NumericFailure as exc:
        exc.step = 3
        raise
    theta, w, sources, wres = step4_heat(problem, prev, s1.chi, s1.E_e, c, mu, d, loads, tau)
    new = State(
        t=t,
        u=s1.u,
        v=(s1.u - prev.u) / tau,
        chi=s1.chi,
        c=c,
        mu=mu,
        d=d,
        w=w,
        theta=theta,
        sigma_r=s1.sigma_r,
        E_e=s1.E_e,
    )
    info = StepInfo(k, t, s1.report.iterations, rep2.iterations, rep3.iterations, wres, sources)
    return new, info


@dataclass
class Trajectory:
    states: list
    ledger: list
    infos: list
    checks: list = field(default_factory=list)
    initial_semistability: object = None
    nonconvex_regime: bool = False

    @property
    def times(self):
        return np.array([s.t for s in self.states])


def run(problem: Problem, initial: State, semistability_trials: int = 0, rng_seed: int = 0,
        progress=None, checks: bool = False) -> Trajectory:
    """Integrate from ``initial`` to ``t_end``.

    Every step is followed by a ledger row. The conservation checks run
    after every step when ``checks`` is set, in strict mode, or when
    ``semistability_trials > 0`` (which adds the random semistability test).
    In strict mode the first failing invariant aborts the run with
    :class:`ConsistencyFailure`. ``progress(k, n, state)`` is called after
    every step.
    """
    from . import diagnostics as dg

    params = problem.params
    n = params.n_steps
    if params.strict and problem.nonconvex_regime:
        raise ConsistencyFailure(
            f"tau={params.tau:g} exceeds the admissible step {problem.tau_admissible:g} "
            "= min(1/M^2, T, 4 b_min^2)",
            invariant="tau_admissible",
        )
    traj = Trajectory([initial.copy()], [], [], nonconvex_regime=problem.nonconvex_regime)
    traj.initial_semistability = dg.check_semistability(
        problem, initial, max(semistability_trials, 300), rng_seed
    )
    if params.strict and not traj.initial_semistability.passed:
        raise ConsistencyFailure("initial damage profile is not semistable", invariant="semistability")
    E0 = dg.mech_chem_energy(problem, initial)
    work_abs = 0.0
    cum_ineq = 0.0
    cum_bal = 0.0
    state = initial
    for k in range(1, n + 1):
        new, info = advance(problem, state, k=k)
        row = dg.ledger_step(problem, state, new)
        work_abs += abs(row.work_mech) + abs(row.work_chem) + abs(row.work_therm)
        row.scale = max(1.0, abs(E0), work_abs)
        cum_ineq += row.step_inequality_residual
        cum_bal += row.total_balance_residual
        row.inequality_residual = cum_ineq
        row.cumulative_balance_residual = cum_bal
        traj.ledger.append(row)
        traj.infos.append(info)
        if params.strict or semistability_trials or checks:
            reports = dg.conservation_suite(problem, state, new)
            if semistability_trials:
                reports.append(
                    dg.check_semistability(problem, new, semistability_trials, rng_seed + k, row.scale)
                )
            reports.append(dg.inequality_check(row))
            traj.checks.append(reports)
            if params.strict:
                for rep in reports:
                    if not rep.passed:
                        raise ConsistencyFailure(
                            f"step {k} (t={new.t:g}): invariant '{rep.name}' violated: "
                            f"value {rep.value:.3e}, tolerance {rep.tolerance:.1e}",
                            invariant=rep.name,
                        )
        traj.states.append(new)
        state = new
        if progress is not None:
            progress(k, n, new)
    return traj
