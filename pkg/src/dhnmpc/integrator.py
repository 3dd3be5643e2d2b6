"""Trapezoidal time discretization shared by the plant and the controllers.

One implicit trapezoidal rule discretizes the continuous thermal dynamics
both for transcribing OCP dynamics constraints and for stepping the
simulated plant, so the controller model and the simulated truth coincide.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["DiscretizationSpec", "StepFailure", "trapezoidal_residual", "implicit_step"]


@dataclass(frozen=True)
class DiscretizationSpec:
    """Sample time and horizon length of the discretization.

    Parameters
    ----------
    T_s : float
        Step length in s.
    K : int
        Number of steps in the horizon (K+1 knots).
    """

    T_s: float
    K: int

    def __post_init__(self):
        if self.T_s <= 0:
            raise ValueError("step length must be positive")
        if self.K < 1:
            raise ValueError("horizon needs at least one step")


class StepFailure(RuntimeError):
    """Implicit step did not converge; carries the final residual norm."""

    def __init__(self, residual_norm: float, iterations: int):
        super().__init__(
            f"implicit trapezoidal step failed to converge: "
            f"|residual| = {residual_norm:.3e} after {iterations} Newton iterations"
        )
        self.residual_norm = residual_norm
        self.iterations = iterations


def trapezoidal_residual(x_k, x_k1, u_k, u_k1, rhs: Callable, T_s: float) -> np.ndarray:
    """Defect of one trapezoidal transition; zero defines a valid step.

    ``rhs(x, u)`` returns the state derivative. The residual is::

        x_k1 - x_k - T_s/2 * (rhs(x_k, u_k) + rhs(x_k1, u_k1))
    """
    x_k = np.asarray(x_k, dtype=float)
    x_k1 = np.asarray(x_k1, dtype=float)
    f0 = np.asarray(rhs(x_k, u_k), dtype=float)
    f1 = np.asarray(rhs(x_k1, u_k1), dtype=float)
    if not (np.all(np.isfinite(f0)) and np.all(np.isfinite(f1))):
        raise ValueError("non-finite right-hand side in trapezoidal residual")
    return x_k1 - x_k - 0.5 * T_s * (f0 + f1)


def implicit_step(
    x_k: np.ndarray,
    u_k,
    u_k1,
    rhs: Callable,
    rhs_jac: Callable,
    T_s: float,
    tol: float = 1e-9,
    max_iter: int = 50,
) -> np.ndarray:
    """Solve the implicit trapezoidal transition for the next state.

    Damped Newton iteration on ``trapezoidal_residual(x_k, x, u_k, u_k1) = 0``
    with the analytic state Jacobian ``rhs_jac(x, u)``. The iteration starts
    from the explicit Euler predictor.

    Raises
    ------
    StepFailure
        If the residual infinity norm does not fall below ``tol`` within
        ``max_iter`` iterations.
    """
    x_k = np.asarray(x_k, dtype=float)
    n = x_k.size
    f0 = np.asarray(rhs(x_k, u_k), dtype=float)
    x = x_k + T_s * f0  # predictor
    eye = np.eye(n)
    res_norm = np.inf
    for it in range(max_iter):
        f1 = np.asarray(rhs(x, u_k1), dtype=float)
        res = x - x_k - 0.5 * T_s * (f0 + f1)
        res_norm = float(np.max(np.abs(res)))
        if res_norm <= tol:
            return x
        jac = eye - 0.5 * T_s * np.asarray(rhs_jac(x, u_k1), dtype=float)
        step = np.linalg.solve(jac, -res)
        # backtracking keeps the residual norm monotone on stiff transients
        alpha = 1.0
        for _ in range(30):
            x_try = x + alpha * step
            f_try = np.asarray(rhs(x_try, u_k1), dtype=float)
            r_try = x_try - x_k - 0.5 * T_s * (f0 + f_try)
            if np.max(np.abs(r_try)) < res_norm or alpha < 1e-6:
                break
            alpha *= 0.5
        x = x + alpha * step
    f1 = np.asarray(rhs(x, u_k1), dtype=float)
    res_norm = float(np.max(np.abs(x - x_k - 0.5 * T_s * (f0 + f1))))
    if res_norm <= tol:
        return x
    raise StepFailure(res_norm, max_iter)
