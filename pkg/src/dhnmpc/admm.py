"""Consensus coordination of per-building MPC subproblems.

One coordination round sweeps the buildings in chain order (Gauss-Seidel):
each subproblem is solved with the freshest copies published by its
predecessor and the previous-iteration copies of its successor, publishes
its shared trajectories, and after the full sweep the dual variables of all
consensus pairs are updated by a (damped) gradient-ascent step. Iterations
stop when the stacked discrepancy norm falls below the tolerance or the
iteration cap is hit; the first controls of the last iterate are applied
either way.

Each physically-shared quantity forms one *consensus pair* with a single
dual trajectory. The dual enters the owner's cost with a plus sign and the
user's cost with a minus sign, so one multiplier prices the disagreement on
both sides.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

__all__ = ["ConsensusPair", "AdmmParams", "AdmmState", "SweepError", "AdmmCoordinator"]


@dataclass(frozen=True)
class ConsensusPair:
    """A shared quantity represented in exactly two neighbouring subproblems."""

    owner: str      # agent whose physical variable this is
    user: str       # agent holding the copy
    owner_var: str  # trajectory name inside the owner's problem
    user_var: str   # trajectory name inside the user's problem
    var_class: str  # "temp" or "flow", selects step size and damping

    def label(self) -> str:
        return f"{self.owner}->{self.user}:{self.owner_var}"


@dataclass(frozen=True)
class AdmmParams:
    """Step sizes, damping, stop conditions and residual norm settings."""

    alpha_temp: float = 0.05
    alpha_flow: float = 0.2
    delta_temp: float = 1.5e5
    delta_flow: float = 6.0e5
    i_max: int = 60
    eps: float = 1.0
    norm: str = "l2"  # l2 | linf
    residual_scale_temp: float = 1.0
    residual_scale_flow: float = 1.0
    jacobi: bool = False

    def alpha(self, var_class: str) -> float:
        return self.alpha_temp if var_class == "temp" else self.alpha_flow

    def delta(self, var_class: str) -> float:
        return self.delta_temp if var_class == "temp" else self.delta_flow

    def scale(self, var_class: str) -> float:
        return self.residual_scale_temp if var_class == "temp" else self.residual_scale_flow


class Subproblem(Protocol):
    """One optimizing agent; buildings implement this, tests may use toys."""

    name: str

    def shared_vars(self) -> tuple[str, ...]: ...

    def solve(
        self,
        copies: dict[str, np.ndarray],
        duals: dict[str, np.ndarray],
        damping: dict[str, float],
    ) -> dict[str, np.ndarray]: ...


class SweepError(RuntimeError):
    """A subproblem failed hard during a sweep."""

    def __init__(self, agent: str, detail):
        super().__init__(f"subproblem {agent} failed during sweep: {detail}")
        self.agent = agent
        self.detail = detail


@dataclass
class AdmmState:
    """Duals, published copies and progress counters of one coordination."""

    params: AdmmParams
    pairs: tuple[ConsensusPair, ...]
    knots: int
    duals: dict[ConsensusPair, np.ndarray] = field(default_factory=dict)
    published: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    residual_history: list[float] = field(default_factory=list)

    def dual(self, pair: ConsensusPair) -> np.ndarray:
        if pair not in self.duals:
            self.duals[pair] = np.zeros(self.knots)
        return self.duals[pair]


@dataclass
class CoordinationResult:
    """Outcome of one receding-horizon coordination call."""

    controls: dict[str, float]               # first-knot user flow per building
    solutions: dict[str, dict[str, np.ndarray]]
    iterations: int
    residual: float
    converged: bool
    telemetry: list[dict]


class AdmmCoordinator:
    """Runs the consensus iteration over an ordered chain of subproblems."""

    def __init__(self, agents: list, pairs: list[ConsensusPair], params: AdmmParams):
        self.agents = list(agents)
        self.order = [a.name for a in self.agents]
        self.pairs = tuple(pairs)
        self.params = params
        for p in self.pairs:
            if p.owner not in self.order or p.user not in self.order:
                raise ValueError(f"pair {p.label()} references unknown agents")

    # -- state construction -------------------------------------------------

    def cold_start(self, measured: dict[tuple[str, str], float], knots: int) -> AdmmState:
        """Zero duals; flat published trajectories at the measured values."""
        state = AdmmState(self.params, self.pairs, knots)
        for p in self.pairs:
            state.duals[p] = np.zeros(knots)
        for key, value in measured.items():
            state.published[key] = np.full(knots, float(value))
        return state

    def warm_start(self, prev: AdmmState) -> AdmmState:
        """Duals retained; published copies shifted one step, last knot held."""
        state = AdmmState(self.params, self.pairs, prev.knots)
        state.duals = {p: lam.copy() for p, lam in prev.duals.items()}
        state.published = {k: shift_trajectory(v) for k, v in prev.published.items()}
        return state

    # -- one iteration ------------------------------------------------------

    def sweep(self, state: AdmmState) -> dict[str, dict[str, np.ndarray]]:
        """Solve every agent once in chain order and publish shared values."""
        solutions: dict[str, dict[str, np.ndarray]] = {}
        snapshot = dict(state.published) if self.params.jacobi else None
        source = snapshot if snapshot is not None else state.published
        for agent in self.agents:
            copies, duals, damping = {}, {}, {}
            for p in self.pairs:
                if p.owner == agent.name:
                    local, other = p.owner_var, (p.user, p.user_var)
                    sign = 1.0
                elif p.user == agent.name:
                    local, other = p.user_var, (p.owner, p.owner_var)
                    sign = -1.0
                else:
                    continue
                if other not in source:
                    # nothing exchanged yet (cold start before the neighbour's
                    # first publication): this term is free for one solve
                    continue
                copies[local] = source[other]
                duals[local] = sign * state.dual(p)
                damping[local] = self.params.delta(p.var_class)
            try:
                sol = agent.solve(copies, duals, damping)
            except Exception as exc:  # noqa: BLE001 - reported with context
                raise SweepError(agent.name, exc) from exc
            for name in agent.shared_vars():
                if not np.all(np.isfinite(sol[name])):
                    raise SweepError(agent.name, f"non-finite trajectory {name}")
            solutions[agent.name] = sol
            for name in agent.shared_vars():
                state.published[(agent.name, name)] = np.asarray(sol[name], dtype=float).copy()
        return solutions

    # -- residuals and duals ------------------------------------------------

    def discrepancies(self, state: AdmmState) -> dict[ConsensusPair, np.ndarray]:
        """Owner-minus-user mismatch per pair from the latest published values."""
        out = {}
        for p in self.pairs:
            own = state.published[(p.owner, p.owner_var)]
            use = state.published[(p.user, p.user_var)]
            out[p] = own - use
        return out

    def residual(self, state: AdmmState) -> float:
        """Stacked norm of all pair discrepancies (scaled per variable class)."""
        parts = [
            self.params.scale(p.var_class) * r
            for p, r in self.discrepancies(state).items()
        ]
        if not parts:
            return 0.0
        stacked = np.concatenate(parts)
        if self.params.norm == "linf":
            return float(np.max(np.abs(stacked)))
        return float(np.linalg.norm(stacked))

    def update_duals(self, state: AdmmState) -> None:
        """Gradient ascent on each pair's dual: lam += alpha * (x - xhat)."""
        for p, r in self.discrepancies(state).items():
            state.duals[p] = state.dual(p) + self.params.alpha(p.var_class) * r

    # -- outer loop ----------------------------------------------------------

    def coordinate(self, state: AdmmState, time_step: int = 0) -> CoordinationResult:
        """Iterate sweeps until consensus or the iteration cap.

        The first-knot user flows of the final iterate are returned even on
        non-convergence; callers apply them and flag the trace.
        """
        params = self.params
        telemetry: list[dict] = []
        solutions: dict[str, dict[str, np.ndarray]] = {}
        res = np.inf
        i = 0
        while i < params.i_max:
            solutions = self.sweep(state)
            res = self.residual(state)
            per_interface = {}
            for p, r in self.discrepancies(state).items():
                key = f"{p.owner}|{p.user}"
                per_interface[key] = per_interface.get(key, 0.0) + float(r @ r)
            telemetry.append(
                {
                    "t": time_step,
                    "iteration": i,
                    "residual": res,
                    "interfaces": {k: float(np.sqrt(v)) for k, v in per_interface.items()},
                }
            )
            self.update_duals(state)
            i += 1
            state.iteration = i
            state.residual_history.append(res)
            if res <= params.eps:
                break
        controls = {
            name: float(sol["m_user"][0]) if "m_user" in sol else float("nan")
            for name, sol in solutions.items()
        }
        return CoordinationResult(
            controls=controls,
            solutions=solutions,
            iterations=i,
            residual=res,
            converged=res <= params.eps,
            telemetry=telemetry,
        )


def shift_trajectory(x: np.ndarray) -> np.ndarray:
    """Receding-horizon shift: drop the first knot, duplicate the last."""
    x = np.asarray(x, dtype=float)
    return np.concatenate([x[1:], x[-1:]])
