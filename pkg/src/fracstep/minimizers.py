"""Box-constrained Newton, soft-thresholding, scalar roots and a grid oracle."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import brentq

from .errors import InvalidArgument, NumericFailure


@dataclass(frozen=True)
class SolveOptions:
    tol_grad: float = 1e-10
    max_iter: int = 100
    shrink: float = 0.5
    armijo: float = 1e-4
    tol_abs: float = 1e-12
    max_backtracks: int = 60

    def __post_init__(self):
        for name in ("tol_grad", "max_iter", "shrink", "armijo", "tol_abs", "max_backtracks"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"SolveOptions.{name} must be positive")
        if not self.shrink < 1:
            raise InvalidArgument("SolveOptions.shrink must be < 1")


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    residual: float
    value: float
    values: list = field(default_factory=list)
    regularized: bool = False


def soft_threshold(v, t):
    """Componentwise shrinkage ``sign(v) * max(|v| - t, 0)``; ``t = inf`` gives 0."""
    v = np.asarray(v, dtype=float)
    t = np.asarray(t, dtype=float)
    with np.errstate(invalid="ignore"):
        out = np.sign(v) * np.maximum(np.abs(v) - t, 0.0)
    return np.where(np.isinf(t), 0.0, out)


def prox_l1_step(smooth_grad, a_coeff, step, x_prev):
    """One forward-backward step for ``f(x) + sum_i a_i |x_i - x_prev_i|``.

    The increment ``delta`` minimizes
    ``a |delta| + |delta - candidate|^2 / (2 step)``, equivalently
    ``smooth_grad . delta + a |delta| + |delta|^2 / (2 step)``, with the
    explicit candidate ``-step * smooth_grad``; returns ``x_prev + delta``.
    """
    if not step > 0:
        raise InvalidArgument("step must be positive")
    g = np.asarray(smooth_grad, dtype=float)
    a = np.broadcast_to(np.asarray(a_coeff, dtype=float), g.shape)
    if np.any(a < 0):
        raise InvalidArgument("a_coeff must be nonnegative")
    return np.asarray(x_prev, dtype=float) + soft_threshold(-step * g, a * step)


def natural_residual(x, g, lower, upper, l1_weight=None, l1_center=None) -> float:
    """Sup-norm of ``x - P_box(prox(x - g))``; zero exactly at a KKT point."""
    if l1_weight is None:
        y = x - g
    else:
        y = l1_center + soft_threshold(x - g - l1_center, l1_weight)
    return float(np.max(np.abs(x - np.clip(y, lower, upper)), initial=0.0))


def _pieces(x, g, lower, upper, w, s):
    """Smooth piece of the box that the iterate currently lives on.

    Returns piece bounds, the gradient of ``f + w|x - s|`` on that piece,
    and the mask of dofs stuck at their kink.
    """
    L, U, geff = lower.copy(), upper.copy(), g.copy()
    stuck = np.zeros(x.shape, dtype=bool)
    if w is None:
        return L, U, geff, stuck
    has = w > 0
    above = has & (x > s)
    below = has & (x < s)
    at = has & (x == s)
    up = at & (g + w < 0) & (upper > s)
    down = at & (g - w > 0) & (lower < s)
    stuck = at & ~up & ~down
    pos, neg = above | up, below | down
    L[pos] = s[pos]
    U[neg] = s[neg]
    L[stuck] = U[stuck] = s[stuck]
    geff[pos] += w[pos]
    geff[neg] -= w[neg]
    geff[stuck] = 0.0
    return L, U, geff, stuck


def _solve(H, rhs, free, reg):
    """Solve the free block of ``H + reg I``; ``None`` if the solve fails."""
    n = int(free.sum())
    if n == 0:
        return np.zeros(0)
    if sp.issparse(H):
        Hff = H.tocsr()[free][:, free]
        if reg:
            Hff = Hff + reg * sp.identity(n, format="csr")
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error")
                d = spla.splu(Hff.tocsc()).solve(rhs)
        except (RuntimeError, spla.MatrixRankWarning, Warning):
            return None
    else:
        Hff = np.asarray(H)[np.ix_(free, free)]
        if reg:
            Hff = Hff + reg * np.eye(n)
        try:
            d = np.linalg.solve(Hff, rhs)
        except np.linalg.LinAlgError:
            return None
    return d if np.all(np.isfinite(d)) else None


def projected_newton(
    value,
    gradient,
    hessian,
    x0,
    lower,
    upper,
    opts: SolveOptions | None = None,
    l1_weight=None,
    l1_center=None,
    raise_on_failure: bool = True,
):
    """Minimize ``value(x) + sum_i w_i |x_i - s_i|`` over a box.

    Bertsekas-style projected Newton: the Newton system is solved on the
    free variables, bound-active variables take a scaled gradient step, and
    an Armijo backtracking search runs along the projection arc. The
    optional weighted absolute-value term (weights ``l1_weight``, kinks at
    ``l1_center``, which must lie in the box) is handled exactly by treating
    each kink as an extra breakpoint; ``inf`` weights pin a dof at its kink.

    Returns ``(x, SolveReport)``. Raises :class:`NumericFailure` when
    ``max_iter`` is exhausted (unless ``raise_on_failure`` is false).
    """
    opts = opts or SolveOptions()
    x = np.array(x0, dtype=float)
    n = x.size
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (n,)).copy()
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (n,)).copy()
    if np.any(lower > upper):
        raise InvalidArgument("lower bound exceeds upper bound")
    w = s = None
    if l1_weight is not None:
        w = np.broadcast_to(np.asarray(l1_weight, dtype=float), (n,)).copy()
        s = np.broadcast_to(np.asarray(l1_center, dtype=float), (n,)).copy()
        if np.any(w < 0):
            raise InvalidArgument("l1 weights must be nonnegative")
        if np.any((s < lower) | (s > upper)):
            raise InvalidArgument("l1 kinks must lie inside the box")
        x = np.where(np.isinf(w), s, x)
    x = np.clip(x, lower, upper)

    def total(z):
        v = value(z)
        if w is not None:
            fin = np.isfinite(w)
            v = v + float(np.sum(w[fin] * np.abs(z[fin] - s[fin])))
        return v

    f = total(x)
    report = SolveReport(False, 0, np.inf, f, [f])
    for it in range(opts.max_iter + 1):
        g = np.asarray(gradient(x), dtype=float)
        res = natural_residual(x, g, lower, upper, w, s)
        report.iterations, report.residual, report.value = it, res, f
        if res <= opts.tol_grad:
            report.converged = True
            return x, report
        if it == opts.max_iter:
            break
        L, U, geff, stuck = _pieces(x, g, lower, upper, w, s)
        eps = min(1e-8, res)
        active = (
            stuck
            | (L == U)
            | ((x <= L + eps) & (geff > 0))
            | ((x >= U - eps) & (geff < 0))
        )
        free = ~active
        H = hessian(x)
        diag = H.diagonal() if sp.issparse(H) else np.diag(np.asarray(H))
        d = np.zeros(n)
        d[active] = -geff[active] / np.maximum(np.abs(diag[active]), 1e-12)
        reg = 0.0
        dfree = _solve(H, -geff[free], free, reg)
        while dfree is None or (free.any() and dfree @ geff[free] >= 0 and np.any(geff[free])):
            trace = float(np.sum(np.abs(diag[free]))) if free.any() else 0.0
            base = max(1e-10 * trace / max(free.sum(), 1), 1e-14 * max(1.0, np.abs(geff).max()))
            reg = base if reg == 0.0 else reg * 100.0
            report.regularized = True
            if reg > 1e12 * max(1.0, trace):
                dfree = -geff[free]
                break
            dfree = _solve(H, -geff[free], free, reg)
        d[free] = dfree

        alpha, accepted = 1.0, False
        xn = np.clip(x + d, L, U)
        noise = 16 * np.finfo(float).eps * max(1.0, abs(f))
        if -float(geff @ (xn - x)) <= noise:
            # decrease below round-off of f: judge the full step by the residual
            fn = total(xn)
            gn = np.asarray(gradient(xn), dtype=float)
            if fn <= f + noise and natural_residual(xn, gn, lower, upper, w, s) < 0.5 * res:
                x, f = xn, fn
                report.values.append(f)
                continue
        for _ in range(opts.max_backtracks):
            xn = np.clip(x + alpha * d, L, U)
            fn = total(xn)
            if fn <= f + opts.armijo * float(geff @ (xn - x)):
                accepted = True
                break
            alpha *= opts.shrink
        if not accepted:
            # fall back to a projected gradient arc
            d = -geff
            alpha = 1.0 / max(np.abs(diag).max(), 1e-12)
            for _ in range(opts.max_backtracks):
                xn = np.clip(x + alpha * d, L, U)
                fn = total(xn)
                if fn <= f + opts.armijo * float(geff @ (xn - x)):
                    accepted = True
                    break
                alpha *= opts.shrink
        if not accepted or np.array_equal(xn, x):
            # no representable decrease left: accept if the residual is at roundoff level
            report.converged = res <= 1e3 * opts.tol_grad
            if report.converged or not raise_on_failure:
                return x, report
            raise NumericFailure(
                f"line search stalled at residual {res:.3e}", x=x, residual=res
            )
        x, f = xn, fn
        report.values.append(f)
    if raise_on_failure:
        raise NumericFailure(
            f"projected Newton: max_iter={opts.max_iter} exceeded, residual {report.residual:.3e}",
            x=x,
            residual=report.residual,
        )
    return x, report


def scalar_root(f, bracket, tol_abs: float = 1e-12, max_iter: int = 200) -> float:
    """Root of a nondecreasing scalar function on a sign-changing bracket."""
    lo, hi = map(float, bracket)
    if not lo <= hi:
        raise InvalidArgument(f"invalid bracket [{lo}, {hi}]")
    flo, fhi = f(lo), f(hi)
    if flo > 0 or fhi < 0:
        raise InvalidArgument(f"bracket does not enclose a root: f(lo)={flo}, f(hi)={fhi}")
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    try:
        return brentq(f, lo, hi, xtol=tol_abs, rtol=4 * np.finfo(float).eps, maxiter=max_iter)
    except RuntimeError:
        # plain bisection always terminates
        for _ in range(2000):
            mid = 0.5 * (lo + hi)
            if hi - lo <= tol_abs:
                break
            if f(mid) <= 0:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)


def brute_force_min(objective, lower, upper, grid_n: int):
    """Exhaustive grid minimizer over at most three dofs.

    ``objective`` receives an array of shape (n_points, n_dof) and returns
    (n_points,) values. Ties go to the lowest multi-index (first grid point
    in C order).
    """
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    ndof = lower.size
    if ndof > 3:
        raise InvalidArgument(f"brute force oracle limited to 3 dofs, got {ndof}")
    if grid_n < 1:
        raise InvalidArgument("grid_n must be >= 1")
    axes = [np.linspace(lo, hi, grid_n) for lo, hi in zip(lower, upper)]
    pts = np.array(list(itertools.product(*axes))) if ndof > 1 else axes[0][:, None]
    try:
        vals = np.asarray(objective(pts), dtype=float).reshape(-1)
        if vals.size != len(pts):
            raise ValueError
    except (ValueError, TypeError):
        vals = np.array([float(objective(p)) for p in pts])
    i = int(np.argmin(vals))
    return pts[i], float(vals[i])
