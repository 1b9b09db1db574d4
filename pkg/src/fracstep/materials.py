"""Free energies, dissipation potentials and transport coefficients.

A :class:`MaterialModel` bundles the mechanical, chemical and thermal parts
of the free energy together with the rate potential for the phase field,
the fracture toughness and the mobility/conductivity tensors. Every method
is vectorized over a leading axis of ``P`` evaluation points:

* ``E``: elastic strain in Mandel notation, shape (P, nsym)
* ``chi``: phase field, shape (P, N)
* ``c``, ``d``, ``theta``: shape (P,)

Damage follows the convention ``d = 1`` intact, ``d = 0`` fully damaged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DomainError, InvalidArgument, NumericFailure
from .geometry import n_sym
from .reports import CheckReport


class MechEval(NamedTuple):
    value: np.ndarray
    dE: np.ndarray
    dchi: np.ndarray
    dd: np.ndarray


class MechHessian(NamedTuple):
    EE: np.ndarray  # (P, nsym, nsym)
    Echi: np.ndarray  # (P, nsym, N)
    chichi: np.ndarray  # (P, N, N)
    Ed: np.ndarray  # (P, nsym)
    chid: np.ndarray  # (P, N)
    dd: np.ndarray  # (P,)


class ChemEval(NamedTuple):
    value: np.ndarray
    dchi: np.ndarray
    dc: np.ndarray
    dcc: np.ndarray
    dchic: np.ndarray
    dchichi: np.ndarray


class TermEval(NamedTuple):
    value: np.ndarray
    dtheta: np.ndarray
    dchi: np.ndarray
    dthetatheta: np.ndarray
    dchitheta: np.ndarray


def trace_vector(dim: int) -> np.ndarray:
    """Mandel representation of the identity: ``tr E = t . E``."""
    return np.ones(1) if dim == 1 else np.array([1.0, 1.0, 0.0])


def _isotropic_stiffness(dim: int, C: float, lam: float, G: float) -> np.ndarray:
    if dim == 1:
        return np.array([[C]])
    t = trace_vector(2)
    return lam * np.outer(t, t) + 2.0 * G * np.eye(3)


class MaterialModel:
    """Base class. Subclasses provide the energy callables.

    Attributes expected on every model: ``dim``, ``N``, ``rho``, ``kappa1``,
    ``kappa2``, ``chi_lower``/``chi_upper`` (the box K), ``M_semiconvex``,
    ``b_min`` (lower bound of the quadratic rate coefficient) and
    ``zeta_depends_on_E``.
    """

    name = "abstract"
    zeta_depends_on_E = False

    # -- geometry of the strain split ------------------------------------
    @property
    def nsym(self) -> int:
        return n_sym(self.dim)

    def E_coupling(self) -> np.ndarray:
        """The tensor mapping chi to the inelastic strain, shape (nsym, N)."""
        raise NotImplementedError

    def D_visc(self) -> np.ndarray:
        """Viscosity tensor in Mandel form, shape (nsym, nsym)."""
        return self.viscosity * np.eye(self.nsym)

    @property
    def chi_box(self):
        return np.asarray(self.chi_lower, dtype=float), np.asarray(self.chi_upper, dtype=float)

    # -- energies ---------------------------------------------------------
    def phi_mech(self, E, chi, d) -> MechEval:
        raise NotImplementedError

    def phi_mech_hessian(self, E, chi, d) -> MechHessian:
        raise NotImplementedError

    def phi_chem(self, chi, c) -> ChemEval:
        raise NotImplementedError

    def phi_term(self, chi, theta) -> TermEval:
        raise NotImplementedError

    def dchi_phi_term(self, chi, theta) -> np.ndarray:
        """``d phi_term / d chi`` with the convention that it vanishes for theta <= 0."""
        theta = np.asarray(theta, dtype=float)
        safe = np.where(theta > 0, theta, 1.0)
        g = self.phi_term(chi, safe).dchi
        return np.where((theta > 0)[:, None], g, 0.0)

    def d2chitheta_phi_term(self, chi, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        safe = np.where(theta > 0, theta, 1.0)
        g = self.phi_term(chi, safe).dchitheta
        return np.where((theta > 0)[:, None], g, 0.0)

    def e_term(self, chi, theta) -> np.ndarray:
        """Thermal part of the internal energy, ``phi - theta d_theta phi``.

        For theta <= 0 the function is continued linearly with slope equal
        to the heat capacity at 0+, so Newton iterates may cross zero.
        """
        theta = np.asarray(theta, dtype=float)
        pos = theta > 0
        safe = np.where(pos, theta, 1.0)
        f = self.phi_term(chi, safe)
        e = f.value - safe * f.dtheta
        c0 = self.heat_capacity(chi, np.full_like(theta, 1e-300))
        return np.where(pos, e, c0 * theta)

    def heat_capacity(self, chi, theta) -> np.ndarray:
        """``d e_term / d theta = -theta d2_theta phi_term``."""
        theta = np.asarray(theta, dtype=float)
        safe = np.where(theta > 0, theta, 1e-300)
        return -safe * self.phi_term(chi, safe).dthetatheta

    def theta_from_w(self, chi, w, tol_abs: float = 1e-12) -> np.ndarray:
        """Invert ``e_term(chi, .)`` pointwise."""
        return _invert_monotone(
            lambda th: self.e_term(chi, th),
            lambda th: self.heat_capacity(chi, th),
            np.asarray(w, dtype=float),
            tol_abs,
            lower=0.0,
        )

    # -- dissipation and transport ---------------------------------------
    def zeta_coeffs(self, E, chi, c, d, theta):
        """Coefficients ``(a, b)`` of ``zeta = a |rate|_1 + b |rate|^2``."""
        P = len(chi)
        return np.full(P, float(self.a_rate)), np.full(P, float(self.b_rate))

    def alpha(self, chi):
        """Fracture toughness and its gradient, shapes (P,) and (P, N)."""
        P = len(chi)
        return np.full(P, float(self.alpha0)), np.zeros((P, self.N))

    def mobility(self, E, chi, c, d, theta) -> np.ndarray:
        return np.broadcast_to(self.mob * np.eye(self.dim), (len(chi), self.dim, self.dim))

    def conductivity(self, E, chi, c, d, theta) -> np.ndarray:
        return np.broadcast_to(self.cond * np.eye(self.dim), (len(chi), self.dim, self.dim))


def _invert_monotone(f, df, target, tol_abs, lower=-np.inf, x0=None, max_iter=200):
    """Solve ``f(x) = target`` for nondecreasing ``f``, elementwise.

    Safeguarded Newton: brackets are grown geometrically, then Newton steps
    falling outside the current bracket are replaced by bisection.
    """
    target = np.atleast_1d(target).astype(float)
    n = target.size
    lo = np.full(n, lower if np.isfinite(lower) else -1.0)
    hi = np.full(n, max(lo.max(initial=0.0) + 1.0, 1.0))
    for _ in range(200):
        bad = f(hi) < target
        if not bad.any():
            break
        hi = np.where(bad, 2.0 * hi + 1.0, hi)
    else:
        raise NumericFailure("could not bracket the inverse from above")
    if not np.isfinite(lower):
        for _ in range(200):
            bad = f(lo) > target
            if not bad.any():
                break
            lo = np.where(bad, 2.0 * lo - 1.0, lo)
        else:
            raise NumericFailure("could not bracket the inverse from below")
    x = np.clip(0.5 * (lo + hi) if x0 is None else np.asarray(x0, dtype=float), lo, hi)
    x = np.where(f(lo) == target, lo, x)
    for _ in range(max_iter):
        r = f(x) - target
        if np.all(np.abs(r) <= tol_abs):
            return x
        lo = np.where(r < 0, x, lo)
        hi = np.where(r > 0, x, hi)
        slope = df(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            xn = x - r / slope
        out = ~np.isfinite(xn) | (xn < lo) | (xn > hi)
        xn = np.where(out, 0.5 * (lo + hi), xn)
        done = (np.abs(r) <= tol_abs) | (hi - lo <= 1e-15 * np.maximum(1.0, np.abs(x)))
        x = np.where(done, x, xn)
        if done.all():
            return x
    raise NumericFailure(
        f"monotone inversion did not converge (max residual {np.abs(f(x) - target).max():.3e})",
        x=x,
    )


# ---------------------------------------------------------------------------
# built-in models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HydrideModel(MaterialModel):
    """Metal/hydride model with swelling, incomplete damage and linear heat capacity.

    ``phi_mech = (delta + d)/2 * E : C E``, ``phi_chem = k/2 (chi - c)^2``,
    ``phi_term = cv theta (1 - ln theta)``, ``alpha = alpha0 (1 - alpha1 chi)``.
    The phase field is scalar and swells isotropically by ``eps_sw``.
    """

    dim: int = 1
    C: float = 1.0
    lam: float = 1.0
    G: float = 1.0
    delta: float = 0.1
    eps_sw: float = 0.1
    k: float = 2.0
    cv: float = 2.0
    alpha0: float = 1.0
    alpha1: float = 0.0
    a_rate: float = 0.0
    b_rate: float = 0.5
    mob: float = 1.0
    cond: float = 1.0
    viscosity: float = 0.0
    rho: float = 0.0
    kappa1: float = 1e-3
    kappa2: float = 1e-3
    chi_min: float = 0.0
    chi_max: float = 1.0
    M_semiconvex: float = 0.0
    name: str = field(default="hydride", init=False)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise InvalidArgument("dim must be 1 or 2")
        if not self.chi_min < self.chi_max:
            raise InvalidArgument("empty phase-field box")
        for p in ("rho", "a_rate", "viscosity", "M_semiconvex", "delta"):
            if getattr(self, p) < 0:
                raise InvalidArgument(f"{p} must be nonnegative")
        for p in ("kappa1", "kappa2", "b_rate"):
            if not getattr(self, p) > 0:
                raise InvalidArgument(f"{p} must be positive")

    @property
    def N(self) -> int:
        return 1

    @property
    def b_min(self) -> float:
        return self.b_rate

    @property
    def chi_lower(self):
        return np.array([self.chi_min])

    @property
    def chi_upper(self):
        return np.array([self.chi_max])

    @property
    def stiffness(self) -> np.ndarray:
        return _isotropic_stiffness(self.dim, self.C, self.lam, self.G)

    def E_coupling(self):
        return self.eps_sw * trace_vector(self.dim)[:, None]

    def phi_mech(self, E, chi, d):
        E = np.asarray(E, dtype=float)
        CE = E @ self.stiffness
        q = 0.5 * np.einsum("ps,ps->p", E, CE)
        s = self.delta + np.asarray(d, dtype=float)
        return MechEval(s * q, s[:, None] * CE, np.zeros((len(E), self.N)), q)

    def phi_mech_hessian(self, E, chi, d):
        E = np.asarray(E, dtype=float)
        P, ns = E.shape
        s = self.delta + np.asarray(d, dtype=float)
        return MechHessian(
            s[:, None, None] * self.stiffness,
            np.zeros((P, ns, self.N)),
            np.zeros((P, self.N, self.N)),
            E @ self.stiffness,
            np.zeros((P, self.N)),
            np.zeros(P),
        )

    def phi_chem(self, chi, c):
        x = np.asarray(chi, dtype=float)[:, 0]
        c = np.asarray(c, dtype=float)
        P = len(x)
        r = x - c
        return ChemEval(
            0.5 * self.k * r**2,
            (self.k * r)[:, None],
            -self.k * r,
            np.full(P, float(self.k)),
            np.full((P, 1), -float(self.k)),
            np.full((P, 1, 1), float(self.k)),
        )

    def phi_term(self, chi, theta):
        th = np.asarray(theta, dtype=float)
        if np.any(th < 0):
            raise DomainError("phi_term requires theta >= 0")
        P = len(th)
        with np.errstate(divide="ignore", invalid="ignore"):
            lnth = np.log(th)
            value = np.where(th > 0, self.cv * th * (1.0 - lnth), 0.0)
            dth = -self.cv * lnth
            dthth = -self.cv / th
        return TermEval(value, dth, np.zeros((P, 1)), dthth, np.zeros((P, 1)))

    def e_term(self, chi, theta):
        return self.cv * np.asarray(theta, dtype=float)

    def heat_capacity(self, chi, theta):
        return np.full(np.shape(theta), float(self.cv))

    def theta_from_w(self, chi, w, tol_abs: float = 1e-12):
        return np.asarray(w, dtype=float) / self.cv

    def alpha(self, chi):
        x = np.asarray(chi, dtype=float)[:, 0]
        return self.alpha0 * (1.0 - self.alpha1 * x), np.full((len(x), 1), -self.alpha0 * self.alpha1)


@dataclass(frozen=True)
class RegularSolutionModel(HydrideModel):
    """Hydride model with a regular-solution mixing energy.

    Adds ``A theta (chi ln chi + (1 - chi) ln(1 - chi))`` to the thermal part
    and the nonconvex enthalpy of mixing ``B chi (1 - chi)`` to the
    mechanical part, which is therefore only semiconvex with constant ``B``.
    The phase field must stay strictly inside (0, 1).
    """

    A_ent: float = 0.5
    B_mix: float = 0.5
    chi_eps: float = 1e-3
    name: str = field(default="regular_solution", init=False)

    def __post_init__(self):
        super().__post_init__()
        if not 0 < self.chi_eps < 0.5:
            raise InvalidArgument("chi_eps must lie in (0, 0.5)")
        if self.M_semiconvex < self.B_mix:
            object.__setattr__(self, "M_semiconvex", float(self.B_mix))

    @property
    def chi_lower(self):
        return np.array([max(self.chi_min, self.chi_eps)])

    @property
    def chi_upper(self):
        return np.array([min(self.chi_max, 1.0 - self.chi_eps)])

    def phi_mech(self, E, chi, d):
        base = super().phi_mech(E, chi, d)
        x = np.asarray(chi, dtype=float)[:, 0]
        mix = self.B_mix * x * (1.0 - x)
        return MechEval(base.value + mix, base.dE, (self.B_mix * (1.0 - 2.0 * x))[:, None], base.dd)

    def phi_mech_hessian(self, E, chi, d):
        h = super().phi_mech_hessian(E, chi, d)
        P = len(h.dd)
        return h._replace(chichi=np.full((P, 1, 1), -2.0 * self.B_mix))

    @staticmethod
    def _check_open(x):
        if np.any((x <= 0) | (x >= 1)):
            raise DomainError("regular-solution entropy needs chi strictly inside (0, 1)")

    def phi_term(self, chi, theta):
        base = super().phi_term(chi, theta)
        x = np.asarray(chi, dtype=float)[:, 0]
        self._check_open(x)
        th = np.asarray(theta, dtype=float)
        ent = x * np.log(x) + (1.0 - x) * np.log(1.0 - x)
        logit = np.log(x / (1.0 - x))
        pos = th > 0
        return TermEval(
            base.value + self.A_ent * th * ent,
            base.dtheta + self.A_ent * ent,
            np.where(pos, self.A_ent * th * logit, 0.0)[:, None],
            base.dthetatheta,
            np.where(pos, self.A_ent * logit, 0.0)[:, None],
        )

    def dchi_phi_term(self, chi, theta):
        x = np.asarray(chi, dtype=float)[:, 0]
        self._check_open(x)
        th = np.asarray(theta, dtype=float)
        return np.where(th > 0, self.A_ent * th * np.log(x / (1.0 - x)), 0.0)[:, None]

    def d2chitheta_phi_term(self, chi, theta):
        x = np.asarray(chi, dtype=float)[:, 0]
        self._check_open(x)
        th = np.asarray(theta, dtype=float)
        return np.where(th > 0, self.A_ent * np.log(x / (1.0 - x)), 0.0)[:, None]


@dataclass(frozen=True)
class PoroelasticModel(MaterialModel):
    """Regularized poroelastic energy with damage-degraded moduli.

    The phase field is ``chi = (pi_pl, p, gamma)``: plastic strain (nsym
    Mandel components), porosity and water content. With ``s = tr E``,
    ``q = |E|^2``, ``r = beta s - gamma + p`` and ``W = (1 + eps s^2)^(-1/2)``::

        phi_mech = (delta + d) [lam1/2 s^2 W + G1 q / sqrt(1 + eps q) + M1/2 r^2 W]
                   + lam0/2 s^2 + G0 q
        phi_chem = k/2 (gamma - c)^2
        phi_term = cv theta (1 - ln theta)

    Only the plastic strain enters the strain split. The box K is finite;
    ``M_semiconvex`` must dominate the nonconvexity of the coupling term on
    that box (the default is checked by :func:`validate_model`).
    """

    dim: int = 1
    lam1: float = 1.0
    G1: float = 1.0
    M1: float = 1.0
    beta: float = 1.0
    reg_eps: float = 0.1
    lam0: float = 1.0
    G0: float = 1.0
    delta: float = 0.1
    k: float = 2.0
    cv: float = 2.0
    alpha0: float = 1.0
    a_rate: float = 0.0
    b_rate: float = 0.5
    mob: float = 1.0
    cond: float = 1.0
    viscosity: float = 0.0
    rho: float = 0.0
    kappa1: float = 1e-3
    kappa2: float = 1e-3
    pl_bound: float = 1.0
    gamma_bound: float = 2.0
    M_semiconvex: float = 2.0
    name: str = field(default="poroelastic_regularized", init=False)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise InvalidArgument("dim must be 1 or 2")
        if not self.reg_eps > 0:
            raise InvalidArgument("reg_eps must be positive")
        if not self.G0 > 0 or self.lam0 < 0:
            raise InvalidArgument("need G0 > 0 and lam0 >= 0")
        for p in ("kappa1", "kappa2", "b_rate"):
            if not getattr(self, p) > 0:
                raise InvalidArgument(f"{p} must be positive")

    @property
    def N(self) -> int:
        return self.nsym + 2

    @property
    def b_min(self) -> float:
        return self.b_rate

    @property
    def chi_lower(self):
        return np.concatenate([np.full(self.nsym, -self.pl_bound), [0.0, -self.gamma_bound]])

    @property
    def chi_upper(self):
        return np.concatenate([np.full(self.nsym, self.pl_bound), [1.0, self.gamma_bound]])

    def E_coupling(self):
        ns = self.nsym
        out = np.zeros((ns, ns + 2))
        out[:, :ns] = np.eye(ns)
        return out

    def _parts(self, E, chi):
        E = np.asarray(E, dtype=float)
        chi = np.asarray(chi, dtype=float)
        t = trace_vector(self.dim)
        eps = self.reg_eps
        s = E @ t
        q = np.einsum("ps,ps->p", E, E)
        r = self.beta * s - chi[:, -1] + chi[:, -2]
        W = (1.0 + eps * s**2) ** -0.5
        W1 = -eps * s * W**3
        W2 = -eps * W**3 + 3.0 * eps**2 * s**2 * W**5
        A = s**2 * W
        A1 = 2.0 * s * W + s**2 * W1
        A2 = 2.0 * W + 4.0 * s * W1 + s**2 * W2
        g = 1.0 + eps * q
        B = q * g**-0.5
        B1 = g**-0.5 - 0.5 * eps * q * g**-1.5
        B2 = -eps * g**-1.5 + 0.75 * eps**2 * q * g**-2.5
        return t, E, s, q, r, W, W1, W2, A, A1, A2, B, B1, B2

    def phi_mech(self, E, chi, d):
        t, E, s, q, r, W, W1, W2, A, A1, A2, B, B1, B2 = self._parts(E, chi)
        D = self.delta + np.asarray(d, dtype=float)
        core = 0.5 * self.lam1 * A + self.G1 * B + 0.5 * self.M1 * r**2 * W
        value = D * core + 0.5 * self.lam0 * s**2 + self.G0 * q
        Ps = 0.5 * self.lam1 * A1 + self.M1 * (r * self.beta * W + 0.5 * r**2 * W1)
        dE = (D * Ps + self.lam0 * s)[:, None] * t + (2.0 * (D * self.G1 * B1 + self.G0))[:, None] * E
        dchi = np.zeros((len(s), self.N))
        dchi[:, -2] = D * self.M1 * r * W
        dchi[:, -1] = -D * self.M1 * r * W
        return MechEval(value, dE, dchi, core)

    def phi_mech_hessian(self, E, chi, d):
        t, E, s, q, r, W, W1, W2, A, A1, A2, B, B1, B2 = self._parts(E, chi)
        D = self.delta + np.asarray(d, dtype=float)
        P, ns = E.shape
        tt = np.outer(t, t)
        Pss = 0.5 * self.lam1 * A2 + self.M1 * (
            self.beta**2 * W + 2.0 * r * self.beta * W1 + 0.5 * r**2 * W2
        )
        EE = (
            (D * Pss + self.lam0)[:, None, None] * tt
            + (2.0 * (D * self.G1 * B1 + self.G0))[:, None, None] * np.eye(ns)
            + (4.0 * D * self.G1 * B2)[:, None, None] * np.einsum("pi,pj->pij", E, E)
        )
        Echi = np.zeros((P, ns, self.N))
        mix = D * self.M1 * (self.beta * W + r * W1)
        Echi[:, :, -2] = mix[:, None] * t
        Echi[:, :, -1] = -mix[:, None] * t
        chichi = np.zeros((P, self.N, self.N))
        w = D * self.M1 * W
        chichi[:, -2, -2] = w
        chichi[:, -1, -1] = w
        chichi[:, -2, -1] = -w
        chichi[:, -1, -2] = -w
        Ps = 0.5 * self.lam1 * A1 + self.M1 * (r * self.beta * W + 0.5 * r**2 * W1)
        Ed = Ps[:, None] * t + (2.0 * self.G1 * B1)[:, None] * E
        chid = np.zeros((P, self.N))
        chid[:, -2] = self.M1 * r * W
        chid[:, -1] = -self.M1 * r * W
        return MechHessian(EE, Echi, chichi, Ed, chid, np.zeros(P))

    def phi_chem(self, chi, c):
        chi = np.asarray(chi, dtype=float)
        c = np.asarray(c, dtype=float)
        P, N = chi.shape
        r = chi[:, -1] - c
        dchi = np.zeros((P, N))
        dchi[:, -1] = self.k * r
        dchic = np.zeros((P, N))
        dchic[:, -1] = -self.k
        dchichi = np.zeros((P, N, N))
        dchichi[:, -1, -1] = self.k
        return ChemEval(0.5 * self.k * r**2, dchi, -self.k * r, np.full(P, float(self.k)), dchic, dchichi)

    def phi_term(self, chi, theta):
        th = np.asarray(theta, dtype=float)
        if np.any(th < 0):
            raise DomainError("phi_term requires theta >= 0")
        P = len(th)
        with np.errstate(divide="ignore", invalid="ignore"):
            lnth = np.log(th)
            value = np.where(th > 0, self.cv * th * (1.0 - lnth), 0.0)
            dth = -self.cv * lnth
            dthth = -self.cv / th
        return TermEval(value, dth, np.zeros((P, self.N)), dthth, np.zeros((P, self.N)))

    def e_term(self, chi, theta):
        return self.cv * np.asarray(theta, dtype=float)

    def heat_capacity(self, chi, theta):
        return np.full(np.shape(theta), float(self.cv))

    def theta_from_w(self, chi, w, tol_abs: float = 1e-12):
        return np.asarray(w, dtype=float) / self.cv


BUILTIN_MODELS = {
    "hydride": HydrideModel,
    "regular_solution": RegularSolutionModel,
    "poroelastic_regularized": PoroelasticModel,
}


def make_model(name: str, **params) -> MaterialModel:
    """Instantiate a built-in model by its config name."""
    try:
        cls = BUILTIN_MODELS[name]
    except KeyError:
        raise InvalidArgument(
            f"unknown model {name!r}; choose from {sorted(BUILTIN_MODELS)}"
        ) from None
    known = {f for f in cls.__dataclass_fields__ if cls.__dataclass_fields__[f].init}
    unknown = set(params) - known
    if unknown:
        raise InvalidArgument(f"unknown parameters for {name}: {sorted(unknown)}")
    return cls(**params)


# ---------------------------------------------------------------------------
# boundary data
# ---------------------------------------------------------------------------


def piecewise_linear(table):
    """Callable interpolating a ``[[t, v], ...]`` table, constant outside."""
    arr = np.asarray(table, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or np.any(np.diff(arr[:, 0]) <= 0):
        raise InvalidArgument("time table must be [[t, v], ...] with increasing t")
    return lambda t: float(np.interp(t, arr[:, 0], arr[:, 1]))


@dataclass
class BoundaryData:
    """Time-dependent loads.

    Each entry is a callable ``t -> array``: ``f_bulk`` nodal (n_nodes, dim),
    ``f_surf`` per facet (n_facets, dim), ``h_surf`` and ``q_surf`` per facet
    (n_facets,). ``None`` means zero.
    """

    f_bulk: object = None
    f_surf: object = None
    h_surf: object = None
    q_surf: object = None

    def evaluate(self, t: float, mesh):
        dim, nn, nf = mesh.dim, mesh.n_nodes, mesh.n_facets
        out = {}
        for name, shape in (
            ("f_bulk", (nn, dim)),
            ("f_surf", (nf, dim)),
            ("h_surf", (nf,)),
            ("q_surf", (nf,)),
        ):
            fn = getattr(self, name)
            v = np.zeros(shape) if fn is None else np.asarray(fn(t), dtype=float)
            if v.shape != shape:
                try:
                    v = np.broadcast_to(v, shape).copy()
                except ValueError:
                    raise InvalidArgument(f"{name} has shape {v.shape}, expected {shape}") from None
            out[name] = v
        for name in ("h_surf", "q_surf"):
            if np.any(out[name] < 0):
                raise InvalidArgument(f"{name} must be nonnegative")
        return out


# ---------------------------------------------------------------------------
# pointwise evaluation helpers
# ---------------------------------------------------------------------------


def _rows(x, width):
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1) if width else a.reshape(1)
    elif a.ndim == 1 and width:
        a = a.reshape(1, -1) if a.size == width else a.reshape(-1, 1)
    return a


def _squeeze(single, *arrs):
    if not single:
        return arrs
    out = []
    for a in arrs:
        a = np.asarray(a)
        v = a[0]
        out.append(float(v) if np.ndim(v) == 0 else v)
    return tuple(out)


def phi_mech_eval(model: MaterialModel, E_e, chi, d):
    """Value and first derivatives of the mechanical energy."""
    d = np.atleast_1d(np.asarray(d, dtype=float))
    single = np.ndim(d) == 1 and d.size == 1 and np.ndim(E_e) <= 1
    r = model.phi_mech(_rows(E_e, model.nsym), _rows(chi, model.N), d)
    return _squeeze(single, *r)


def phi_chem_eval(model: MaterialModel, chi, c):
    """``(value, dchi, dc, dcc, dchic)``; ``dc`` is the chemical potential."""
    c = np.atleast_1d(np.asarray(c, dtype=float))
    single = c.size == 1
    r = model.phi_chem(_rows(chi, model.N), c)
    return _squeeze(single, r.value, r.dchi, r.dc, r.dcc, r.dchic)


def phi_term_eval(model: MaterialModel, chi, theta):
    """``(value, dtheta, dchi, dthetatheta, dchitheta)``; dchi vanishes for theta <= 0."""
    th = np.atleast_1d(np.asarray(theta, dtype=float))
    single = th.size == 1
    x = _rows(chi, model.N)
    if np.all(th >= 0):
        r = model.phi_term(x, th)
        r = r._replace(dchi=model.dchi_phi_term(x, th), dchitheta=model.d2chitheta_phi_term(x, th))
    else:
        z = np.zeros_like(th)
        zc = np.zeros((len(th), model.N))
        r = TermEval(z, z, zc, z, zc)
    return _squeeze(single, *r)


def e_term_eval(model: MaterialModel, chi, theta):
    th = np.atleast_1d(np.asarray(theta, dtype=float))
    out = model.e_term(_rows(chi, model.N), th)
    return float(out[0]) if th.size == 1 and np.ndim(theta) == 0 else out


def theta_from_w(model: MaterialModel, chi, w, tol_abs: float = 1e-12):
    wa = np.atleast_1d(np.asarray(w, dtype=float))
    if np.any(wa < 0):
        raise InvalidArgument("enthalpy must be nonnegative")
    out = model.theta_from_w(_rows(chi, model.N), wa, tol_abs)
    return float(out[0]) if wa.size == 1 and np.ndim(w) == 0 else out


def zeta_parts(a_coeff, b_coeff, rate):
    """``(value, smooth subgradient, a)`` of ``a |rate|_1 + b |rate|^2``.

    ``rate`` has shape (N,) or (P, N); the coefficients broadcast over points.
    """
    b = np.asarray(b_coeff, dtype=float)
    if not np.all(b > 0):
        raise InvalidArgument("quadratic rate coefficient b must be positive")
    a = np.asarray(a_coeff, dtype=float)
    if np.any(a < 0):
        raise InvalidArgument("rate coefficient a must be nonnegative")
    rate = np.asarray(rate, dtype=float)
    value = a * np.abs(rate).sum(axis=-1) + b * (rate**2).sum(axis=-1)
    sub = 2.0 * b[..., None] * rate if rate.ndim > 1 else 2.0 * b * rate
    return value, sub, a


def zeta_eval(model: MaterialModel, state_args, rate):
    """Rate potential at ``state_args = (E, chi, c, d, theta)`` for one point."""
    E, chi, c, d, theta = state_args
    a, b = model.zeta_coeffs(
        _rows(E, model.nsym), _rows(chi, model.N), np.atleast_1d(c), np.atleast_1d(d), np.atleast_1d(theta)
    )
    value, sub, a = zeta_parts(a[0], b[0], np.asarray(rate, dtype=float).reshape(-1))
    return float(value), sub, float(a)


def legendre_chem(model: MaterialModel, chi, mu, c0=None, tol_abs: float = 1e-13):
    """Conjugate ``sup_c (mu c - phi_chem(chi, c))`` and its maximizer.

    The maximizer solves ``d_c phi_chem(chi, c) = mu`` by safeguarded Newton.
    Returns ``(conj_value, c_of_mu)``.
    """
    mu_a = np.atleast_1d(np.asarray(mu, dtype=float))
    x = _rows(chi, model.N)
    if len(x) == 1 and len(mu_a) > 1:
        x = np.repeat(x, len(mu_a), axis=0)
    c = _invert_monotone(
        lambda cc: model.phi_chem(x, cc).dc,
        lambda cc: model.phi_chem(x, cc).dcc,
        mu_a,
        tol_abs,
        x0=c0,
    )
    conj = mu_a * c - model.phi_chem(x, c).value
    if mu_a.size == 1 and np.ndim(mu) == 0:
        return float(conj[0]), float(c[0])
    return conj, c


# ---------------------------------------------------------------------------
# sampled validation of the modelling assumptions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleSpec:
    """Probe grid for :func:`validate_model`.

    Random samples are drawn uniformly from the given ranges (the phase
    field always from the model's box).
    """

    n_samples: int = 200
    E_range: float = 2.0
    c_range: tuple = (-2.0, 2.0)
    theta_range: tuple = (1e-2, 10.0)
    large_E: float = 1e3
    seed: int = 0


@dataclass
class ValidationReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> CheckReport:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": [c.to_dict() for c in self.checks]}


def _sample_states(model, spec: SampleSpec, rng):
    n = spec.n_samples
    lo, hi = model.chi_box
    E = rng.uniform(-spec.E_range, spec.E_range, (n, model.nsym))
    chi = rng.uniform(lo, hi, (n, model.N))
    c = rng.uniform(*spec.c_range, n)
    d = rng.uniform(0.0, 1.0, n)
    theta = rng.uniform(*spec.theta_range, n)
    return E, chi, c, d, theta


def validate_model(model: MaterialModel, sample_spec: SampleSpec | None = None) -> ValidationReport:
    """Spot-check the structural assumptions on random samples."""
    spec = sample_spec or SampleSpec()
    rng = np.random.default_rng(spec.seed)
    E, chi, c, d, theta = _sample_states(model, spec, rng)
    n = len(d)
    checks = []

    def report(name, values, ok_mask, tol, note="", larger_is_worse=False):
        values = np.asarray(values, dtype=float)
        i = int(np.argmax(values) if larger_is_worse else np.argmin(values))
        checks.append(
            CheckReport(
                name,
                bool(np.all(ok_mask)),
                tol,
                float(values[i]),
                {"E": E[i], "chi": chi[i], "c": c[i], "d": d[i], "theta": theta[i]},
                note,
            )
        )

    # coercivity: phi_mech / |E|^2 stays positive far out along every probe ray
    R = spec.large_E
    dirs = E / np.maximum(np.linalg.norm(E, axis=1, keepdims=True), 1e-300)
    big = R * dirs
    ratio = model.phi_mech(big, chi, d).value / R**2
    report("coercivity", ratio, ratio > 0, 0.0, "min phi_mech/|E|^2 at |E|=%g" % R)

    # growth of the (E, chi) gradient: sampled ratio at two radii
    g_small = model.phi_mech(dirs * 10.0, chi, d)
    g_big = model.phi_mech(big, chi, d)
    gs = np.hypot(np.linalg.norm(g_small.dE, axis=1), np.linalg.norm(g_small.dchi, axis=1)) / 11.0
    gb = np.hypot(np.linalg.norm(g_big.dE, axis=1), np.linalg.norm(g_big.dchi, axis=1)) / (1.0 + R)
    grow = gb / np.maximum(gs, 1e-300)
    report("growth", grow, grow <= 10.0, 10.0, "ratio of |grad|/(1+|E|) at two radii", True)

    # heat capacity bounds
    cap = model.heat_capacity(chi, theta)
    report(
        "heat_capacity",
        cap,
        np.isfinite(cap) & (cap > 0),
        0.0,
        "min -theta d2_theta phi_term",
    )

    # strong convexity in E: second differences along random directions
    h = 1e-3
    v = rng.normal(size=E.shape)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f0 = model.phi_mech(E, chi, d).value
    fp = model.phi_mech(E + h * v, chi, d).value
    fm = model.phi_mech(E - h * v, chi, d).value
    sd = (fp + fm - 2.0 * f0) / h**2
    report("strong_convexity_E", sd, sd > 1e-8, 1e-8, "min second difference in E")

    # semiconvexity: phi_mech + phi_chem + M|chi|^2 midpoint convex in (E, chi)
    M = float(model.M_semiconvex)
    lo, hi = model.chi_box
    E2 = rng.uniform(-spec.E_range, spec.E_range, E.shape)
    chi2 = rng.uniform(lo, hi, chi.shape)

    def joint(Ex, x):
        return (
            model.phi_mech(Ex, x, d).value
            + model.phi_chem(x, c).value
            + M * np.sum(x**2, axis=1)
        )

    mid = joint(0.5 * (E + E2), 0.5 * (chi + chi2))
    gap = 0.5 * (joint(E, chi) + joint(E2, chi2)) - mid
    scale = 1e-10 * np.maximum(1.0, np.abs(mid))
    report("semiconvexity", gap, gap >= -scale, 1e-10, f"midpoint gap with M={M:g}")

    # strong convexity in c
    cc = model.phi_chem(chi, c)
    hc = 1e-3
    sdc = (model.phi_chem(chi, c + hc).value + model.phi_chem(chi, c - hc).value - 2 * cc.value) / hc**2
    report("strong_convexity_c", np.minimum(sdc, cc.dcc), (sdc > 1e-8) & (cc.dcc > 1e-8), 1e-8)

    # mobility and conductivity: uniformly positive definite and bounded
    for name, fn in (("mobility", model.mobility), ("conductivity", model.conductivity)):
        T = fn(E, chi, c, d, theta)
        sym = np.allclose(T, np.swapaxes(T, -1, -2))
        ev = np.linalg.eigvalsh(0.5 * (T + np.swapaxes(T, -1, -2)))
        report(
            f"{name}_definite",
            ev[:, 0],
            sym & (ev[:, 0] > 0) & np.isfinite(ev).all(),
            0.0,
            f"eigenvalues in [{ev.min():.3g}, {ev.max():.3g}]",
        )

    a, b = model.zeta_coeffs(E, chi, c, d, theta)
    report("zeta_coefficients", b, (a >= 0) & (b > 0), 0.0, "min quadratic coefficient b")

    al, _ = model.alpha(chi)
    report("alpha_positive", al, al > 0, 0.0, "min alpha")

    # sampled ratio for the growth of d_chi phi_term (reported, not asserted)
    gth = np.linalg.norm(model.dchi_phi_term(chi, theta), axis=1)
    rhs = np.sqrt(1.0 + np.abs(f0) + np.abs(cc.value) + np.abs(model.e_term(chi, theta)))
    report(
        "phi_term_chi_growth",
        gth / rhs,
        np.ones(n, dtype=bool),
        0.0,
        "sampled max |d_chi phi_term| / sqrt(1 + energy); informational",
        True,
    )
    return ValidationReport(checks)


__all__ = [
    "MaterialModel",
    "HydrideModel",
    "RegularSolutionModel",
    "PoroelasticModel",
    "BUILTIN_MODELS",
    "make_model",
    "BoundaryData",
    "piecewise_linear",
    "phi_mech_eval",
    "phi_chem_eval",
    "phi_term_eval",
    "e_term_eval",
    "theta_from_w",
    "zeta_eval",
    "zeta_parts",
    "legendre_chem",
    "SampleSpec",
    "ValidationReport",
    "validate_model",
]
