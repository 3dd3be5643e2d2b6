"""Small dense NLP solver used by every MPC solve.

Smooth cost, nonlinear equality constraints and box bounds. The solve runs
in two phases: a sequential quadratic programming pass (scipy's SLSQP)
finds the neighbourhood of a local optimum, then an augmented Lagrangian
polish with projected Newton inner steps certifies the feasibility and
stationarity tolerances. The transcribed problems are small (tens of
variables) and their trapezoidal dynamics ring on stiff pipe segments, so
robust globalization matters more than per-iteration cost; everything is
dense and fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize

__all__ = ["NlpProblem", "SolverTolerances", "SolveReport", "solve", "check_gradients"]


@dataclass
class NlpProblem:
    """Finite-dimensional program: min cost(x) s.t. c_eq(x) = 0, lo <= x <= hi.

    ``cost_and_grad`` returns the objective and its analytic gradient in one
    call; ``c_eq``/``c_jac`` may be ``None`` for pure box problems. Bounds
    may contain ``+/-inf``.
    """

    n: int
    cost_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]]
    lo: np.ndarray
    hi: np.ndarray
    x0: np.ndarray
    c_eq: Callable[[np.ndarray], np.ndarray] | None = None
    c_jac: Callable[[np.ndarray], np.ndarray] | None = None
    #: natural magnitude of the cost curvature; the solver minimizes
    #: cost/objective_scale so stationarity tolerances are scale-free
    objective_scale: float = 1.0
    #: exact Hessian diagonal of the (unscaled) cost when it is quadratic
    #: separable; estimated once by differences of the gradient if absent
    cost_hess_diag: np.ndarray | None = None
    #: optional exact constraint curvature: c_hess_vec(x, y) = sum_i y_i * H(c_i)
    c_hess_vec: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        self.x0 = np.asarray(self.x0, dtype=float)
        if not (self.lo.shape == self.hi.shape == self.x0.shape == (self.n,)):
            raise ValueError("bounds and initial guess must have shape (n,)")
        if np.any(self.lo > self.hi):
            raise ValueError("empty box: lo > hi somewhere")
        if not np.all(np.isfinite(self.x0)):
            raise ValueError("initial guess contains non-finite entries")


@dataclass(frozen=True)
class SolverTolerances:
    """Convergence and budget settings."""

    eq_tol: float = 1e-6
    kkt_tol: float = 1e-6
    sqp_maxiter: int = 300
    #: SQP phase stops on relative cost stalls of this size; the augmented
    #: Lagrangian polish then certifies the tight tolerances
    sqp_ftol: float = 1e-9
    penalty_init: float = 1e4
    penalty_growth: float = 10.0
    penalty_max: float = 1e12
    max_outer: int = 12
    inner_maxiter: int = 40


@dataclass
class SolveReport:
    """Result of one solve; ``converged`` certifies both tolerance checks."""

    x: np.ndarray
    cost: float
    max_eq_violation: float
    kkt_residual: float
    iterations: int
    status: str  # converged | max_iter | line_search_failure
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _projected_gradient_norm(x, g, lo, hi) -> float:
    """Infinity norm of the gradient projected onto the feasible box."""
    pg = np.array(g, dtype=float)
    at_lo = x <= lo + 1e-12
    at_hi = x >= hi - 1e-12
    pg[at_lo & (pg > 0)] = 0.0
    pg[at_hi & (pg < 0)] = 0.0
    return float(np.max(np.abs(pg))) if pg.size else 0.0


def _kkt_residual(p, x, g_scaled, lam) -> float:
    """Projected norm of grad f + J'lam (scaled objective units)."""
    if p.c_eq is None:
        return _projected_gradient_norm(x, g_scaled, p.lo, p.hi)
    g_lag = g_scaled + p.c_jac(x).T @ lam
    return _projected_gradient_norm(x, g_lag, p.lo, p.hi)


def _estimate_multipliers(p, x, g_scaled) -> np.ndarray:
    """Least-squares multipliers on the bound-inactive rows."""
    J = p.c_jac(x)
    free = (x > p.lo + 1e-10) & (x < p.hi - 1e-10)
    if not np.any(free):
        return np.zeros(J.shape[0])
    A = J[:, free].T
    lam, *_ = np.linalg.lstsq(A, -g_scaled[free], rcond=None)
    return lam


def _inner_projected_newton(fgh, x, lo, hi, gtol, maxiter):
    """Minimize a smooth function over a box by damped projected Newton.

    ``fgh(x)`` returns value, gradient and a symmetric curvature model.
    Bound-active variables with outward gradients are frozen, the Newton
    system is solved on the free set (with diagonal damping escalated until
    positive definite), and an Armijo backtracking search projects each
    trial point into the box. Returns (x, iterations, stalled).
    """
    n = x.size
    f, g, H = fgh(x)
    for it in range(maxiter):
        at_lo = (x <= lo + 1e-12) & (g > 0)
        at_hi = (x >= hi - 1e-12) & (g < 0)
        free = ~(at_lo | at_hi)
        pg = np.where(free, g, 0.0)
        if float(np.max(np.abs(pg))) <= gtol:
            return x, it, False
        idx = np.flatnonzero(free)
        Hff = H[np.ix_(idx, idx)]
        gf = g[idx]
        tau = 0.0
        base = max(float(np.max(np.abs(Hff))), 1.0) if idx.size else 1.0
        L = None
        for k in range(20):
            try:
                L = np.linalg.cholesky(Hff + tau * np.eye(idx.size))
                break
            except np.linalg.LinAlgError:
                tau = base * 10.0 ** (k - 8)
        if L is None:
            return x, it, True
        p_step = np.zeros(n)
        p_step[idx] = -np.linalg.solve(L.T, np.linalg.solve(L, gf))
        alpha = 1.0
        accepted = False
        slope = float(g @ p_step)
        for _ in range(40):
            x_t = np.clip(x + alpha * p_step, lo, hi)
            f_t, g_t, H_t = fgh(x_t)
            if f_t <= f + 1e-4 * alpha * min(slope, 0.0) + 1e-14 * abs(f):
                x, f, g, H = x_t, f_t, g_t, H_t
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            return x, it + 1, True
    return x, maxiter, False


def _al_polish(p, x, lam, tol, s):
    """Augmented Lagrangian refinement with exact-curvature Newton steps."""

    def fg(z):
        f, g = p.cost_and_grad(z)
        return f / s, g / s

    if p.cost_hess_diag is not None:
        Hdiag = np.asarray(p.cost_hess_diag, dtype=float) / s
    else:
        Hdiag = np.empty(p.n)
        for i in range(p.n):
            h = 1e-5 * max(1.0, abs(x[i]))
            xp = x.copy(); xp[i] += h
            xm = x.copy(); xm[i] -= h
            Hdiag[i] = (fg(xp)[1][i] - fg(xm)[1][i]) / (2 * h)
        Hdiag = np.maximum(Hdiag, 0.0)

    mu = tol.penalty_init
    total_inner = 0
    prev_viol = np.inf
    stalled = False
    for _ in range(tol.max_outer):
        def al_fgh(z, lam=lam, mu=mu):
            f, g = fg(z)
            c = p.c_eq(z)
            J = p.c_jac(z)
            y = lam + mu * c
            val = f + lam @ c + 0.5 * mu * (c @ c)
            grad = g + J.T @ y
            H = (mu * J.T) @ J
            H[np.diag_indices_from(H)] += Hdiag
            if p.c_hess_vec is not None:
                H = H + p.c_hess_vec(z, y)
            return val, grad, H

        x, nit, stalled = _inner_projected_newton(
            al_fgh, x, p.lo, p.hi, tol.kkt_tol, tol.inner_maxiter
        )
        total_inner += nit
        c = np.asarray(p.c_eq(x))
        viol = float(np.max(np.abs(c))) if c.size else 0.0
        lam = lam + mu * c
        _, g = fg(x)
        kkt = _kkt_residual(p, x, g, lam)
        if viol <= tol.eq_tol and kkt <= tol.kkt_tol:
            return x, lam, total_inner, True, stalled
        if viol > 0.25 * prev_viol:
            mu = min(mu * tol.penalty_growth, tol.penalty_max)
        prev_viol = viol
    return x, lam, total_inner, False, stalled


def solve(p: NlpProblem, tol: SolverTolerances = SolverTolerances()) -> SolveReport:
    """Minimize the problem to the requested stationarity and feasibility.

    Phase one runs SQP from the supplied guess; phase two certifies (or
    restores) the tolerances with augmented Lagrangian Newton steps. The
    report always carries the best iterate: receding-horizon callers apply
    it and flag non-convergence instead of raising.
    """
    x = np.clip(p.x0, p.lo, p.hi)
    s = max(1.0, float(p.objective_scale))

    def fg(z):
        f, g = p.cost_and_grad(z)
        return f / s, g / s

    if p.c_eq is None:
        res = minimize(
            fg, x, jac=True, method="L-BFGS-B", bounds=list(zip(p.lo, p.hi)),
            options={"maxiter": tol.sqp_maxiter * 4, "ftol": 1e-15,
                     "gtol": tol.kkt_tol * 0.1, "maxls": 50},
        )
        x = np.clip(res.x, p.lo, p.hi)
        _, g = fg(x)
        kkt = _projected_gradient_norm(x, g, p.lo, p.hi)
        status = "converged" if kkt <= tol.kkt_tol else (
            "line_search_failure" if res.status == 2 else "max_iter"
        )
        return SolveReport(x, p.cost_and_grad(x)[0], 0.0, kkt, int(res.nit), status)

    res = minimize(
        fg, x, jac=True, method="SLSQP", bounds=list(zip(p.lo, p.hi)),
        constraints=[{"type": "eq", "fun": p.c_eq, "jac": p.c_jac}],
        options={"maxiter": tol.sqp_maxiter, "ftol": tol.sqp_ftol},
    )
    x = np.clip(res.x, p.lo, p.hi)
    iterations = int(res.nit)

    _, g = fg(x)
    lam = _estimate_multipliers(p, x, g)
    c = np.asarray(p.c_eq(x))
    viol = float(np.max(np.abs(c)))
    kkt = _kkt_residual(p, x, g, lam)

    stalled = False
    if viol > tol.eq_tol or kkt > tol.kkt_tol:
        x, lam, nit, ok, stalled = _al_polish(p, x, lam, tol, s)
        iterations += nit
        c = np.asarray(p.c_eq(x))
        viol = float(np.max(np.abs(c)))
        _, g = fg(x)
        kkt = _kkt_residual(p, x, g, lam)

    if viol <= tol.eq_tol and kkt <= tol.kkt_tol:
        status = "converged"
    elif stalled or res.status == 8:
        status = "line_search_failure"
    else:
        status = "max_iter"
    return SolveReport(x, p.cost_and_grad(x)[0], viol, kkt, iterations, status, lam * s)


def check_gradients(p: NlpProblem, point: np.ndarray, h: float = 1e-6) -> float:
    """Max relative error of analytic derivatives against central differences.

    Checks the cost gradient and, when present, the equality Jacobian. The
    step is scaled per variable by ``max(1, |x_i|)``.
    """
    x = np.clip(np.asarray(point, dtype=float), p.lo, p.hi)
    n = p.n
    _, g_ana = p.cost_and_grad(x)
    g_num = np.empty(n)
    J_num = None
    J_ana = None
    if p.c_eq is not None:
        J_ana = np.asarray(p.c_jac(x))
        J_num = np.empty_like(J_ana)
    for i in range(n):
        hi = h * max(1.0, abs(x[i]))
        xp = x.copy(); xp[i] += hi
        xm = x.copy(); xm[i] -= hi
        fp, _ = p.cost_and_grad(xp)
        fm, _ = p.cost_and_grad(xm)
        g_num[i] = (fp - fm) / (2 * hi)
        if J_num is not None:
            J_num[:, i] = (np.asarray(p.c_eq(xp)) - np.asarray(p.c_eq(xm))) / (2 * hi)
    scale = max(1.0, float(np.max(np.abs(g_ana))))
    err = float(np.max(np.abs(g_num - g_ana))) / scale
    if J_num is not None and J_ana.size:
        jscale = max(1.0, float(np.max(np.abs(J_ana))))
        err = max(err, float(np.max(np.abs(J_num - J_ana))) / jscale)
    return err
