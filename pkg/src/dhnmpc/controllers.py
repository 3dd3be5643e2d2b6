"""Receding-horizon controllers: independent per-building MPC and the
consensus-coordinated variant.

Both controllers read the measured plant state at each sample, solve one
horizon, and hand back the first-knot user flow requests. Warm starting
shifts the previous solution (and, for the distributed scheme, the
coordination state) by one step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .admm import AdmmCoordinator, AdmmParams, AdmmState, ConsensusPair, shift_trajectory
from .network import NetworkTopology, max_user_flow
from .ocp import (
    OcpSpec,
    ReferenceBundle,
    SHARED_WITH_PRED,
    SHARED_WITH_SUCC,
    assemble_dec_ocp,
    assemble_dmpc_ocp,
)
from .plant import PlantModel
from .solver import SolverTolerances, solve

__all__ = [
    "Profiles",
    "DecMpcController",
    "BuildingAgent",
    "DmpcController",
    "consensus_pairs_for_chain",
]


@dataclass(frozen=True)
class Profiles:
    """Setpoint and ambient forecasts as callables of absolute time in s."""

    T_set: Callable[[float], float]
    T_amb: Callable[[float], float]

    def sample(self, t: float, T_s: float, knots: int) -> tuple[np.ndarray, np.ndarray]:
        times = t + T_s * np.arange(knots)
        return (
            np.array([self.T_set(tk) for tk in times]),
            np.array([self.T_amb(tk) for tk in times]),
        )


def _measured_building_state(plant: PlantModel, x: np.ndarray, i: int) -> dict[str, float]:
    base = plant.state_index(i, "T_F")
    out = {
        "T_feed": float(x[base]),
        "T_S1": float(x[base + 1]),
        "T_S2": float(x[base + 2]),
        "T_S3": float(x[base + 3]),
        "T_b": float(x[base + 4]),
        "T_return": float(x[base + 5]),
    }
    if i == plant.topo.n_buildings - 1:
        out["T_bypass"] = float(x[plant.bypass_index])
    return out


class DecMpcController:
    """Independent building optimizations without any information exchange."""

    def __init__(
        self,
        topo: NetworkTopology,
        spec: OcpSpec,
        profiles: Profiles,
        solver_tol: SolverTolerances = SolverTolerances(),
    ):
        self.topo = topo
        self.spec = spec
        self.profiles = profiles
        self.tol = solver_tol
        self.plant = PlantModel(topo)
        self.m_user_max = [max_user_flow(b, topo.fluid) for b in topo.buildings]
        self._guess: list[np.ndarray | None] = [None] * topo.n_buildings
        self._layout = [None] * topo.n_buildings

    def step(self, t: float, x: np.ndarray) -> tuple[list[float], dict]:
        knots = self.spec.disc.K + 1
        T_set, T_amb = self.profiles.sample(t, self.spec.disc.T_s, knots)
        refs = ReferenceBundle(T_set=T_set, T_amb=T_amb)
        requests = []
        all_ok = True
        for i, b in enumerate(self.topo.buildings):
            meas = _measured_building_state(self.plant, x, i)
            x0 = {k: meas[k] for k in ("T_S1", "T_S2", "T_S3", "T_b")}

            def make(guess):
                return assemble_dec_ocp(
                    b, self.topo.fluid, self.spec, x0, refs,
                    T_feed_measured=meas["T_feed"],
                    m_user_max=self.m_user_max[i],
                    x_guess=guess,
                )

            # the transcription is multimodal: continue the warm branch and
            # also re-solve from a fresh rollout, keep the cheaper optimum
            ocp = make(None)
            report = solve(ocp.nlp, self.tol)
            if self._guess[i] is not None:
                warm = make(self._shift(i, self._guess[i]))
                rep_w = solve(warm.nlp, self.tol)
                if rep_w.converged and (not report.converged or rep_w.cost < report.cost):
                    ocp, report = warm, rep_w
            self._guess[i] = report.x
            self._layout[i] = ocp.layout
            all_ok = all_ok and report.converged
            requests.append(float(ocp.trajectories(report.x)["m_user"][0]))
        return requests, {"converged": all_ok, "iterations": 0, "residual": 0.0, "telemetry": []}

    def _shift(self, i: int, z: np.ndarray) -> np.ndarray:
        layout = self._layout[i]
        tr = layout.unpack(z)
        return layout.pack({k: shift_trajectory(v) for k, v in tr.items()})


class BuildingAgent:
    """One building's consensus subproblem inside the coordination sweep."""

    def __init__(
        self,
        building,
        fluid,
        spec: OcpSpec,
        kind: str,
        m_user_max: float,
        flow_cap: float,
        solver_tol: SolverTolerances,
        frozen_flows: dict[str, np.ndarray] | None = None,
    ):
        self.name = building.name
        self.building = building
        self.fluid = fluid
        self.spec = spec
        self.kind = kind
        self.m_user_max = m_user_max
        self.flow_cap = flow_cap
        self.tol = solver_tol
        self.frozen_flows = frozen_flows
        self.x0: dict[str, float] = {}
        self.refs_base: tuple[np.ndarray, np.ndarray] | None = None
        self.producer_flow: np.ndarray | None = None
        self.producer_temp: np.ndarray | None = None
        self._guess: np.ndarray | None = None
        self._layout = None
        self.last_report = None

    def shared_vars(self) -> tuple[str, ...]:
        out: tuple[str, ...] = ()
        if self.kind in ("middle", "tail"):
            out = out + SHARED_WITH_PRED
        if self.kind in ("head", "middle"):
            out = out + SHARED_WITH_SUCC
        return out

    def set_step_data(
        self,
        x0: dict[str, float],
        T_set: np.ndarray,
        T_amb: np.ndarray,
        producer_flow: np.ndarray | None = None,
        producer_temp: np.ndarray | None = None,
    ) -> None:
        self.x0 = x0
        self.refs_base = (T_set, T_amb)
        self.producer_flow = producer_flow
        self.producer_temp = producer_temp

    def shift_guess(self) -> None:
        if self._guess is not None and self._layout is not None:
            tr = self._layout.unpack(self._guess)
            self._guess = self._layout.pack({k: shift_trajectory(v) for k, v in tr.items()})

    def solve(self, copies, duals, damping) -> dict[str, np.ndarray]:
        T_set, T_amb = self.refs_base
        refs = ReferenceBundle(T_set=T_set, T_amb=T_amb, copies=copies, duals=duals, damping=damping)
        ocp = assemble_dmpc_ocp(
            self.building, self.fluid, self.spec, self.kind, self.x0, refs,
            m_user_max=self.m_user_max, flow_cap=self.flow_cap,
            producer_flow=self.producer_flow, producer_temp=self.producer_temp,
            frozen_flows=self.frozen_flows, x_guess=self._guess,
        )
        report = solve(ocp.nlp, self.tol)
        self._guess = report.x
        self._layout = ocp.layout
        self.last_report = report
        return ocp.trajectories(report.x)


def consensus_pairs_for_chain(names: list[str]) -> list[ConsensusPair]:
    """The four shared quantities per neighbouring pair of the chain.

    Feed-side quantities belong to the upstream building, return-side
    quantities to the downstream one.
    """
    pairs = []
    for up, down in zip(names, names[1:]):
        pairs.append(ConsensusPair(up, down, "feed_out_flow", "feed_in_flow", "flow"))
        pairs.append(ConsensusPair(up, down, "feed_out_temp", "feed_in_temp", "temp"))
        pairs.append(ConsensusPair(down, up, "return_out_flow", "return_in_flow", "flow"))
        pairs.append(ConsensusPair(down, up, "return_out_temp", "return_in_temp", "temp"))
    return pairs


class DmpcController:
    """Consensus-coordinated distributed MPC over the building chain."""

    def __init__(
        self,
        topo: NetworkTopology,
        spec: OcpSpec,
        admm_params: AdmmParams,
        profiles: Profiles,
        solver_tol: SolverTolerances = SolverTolerances(),
    ):
        self.topo = topo
        self.spec = spec
        self.profiles = profiles
        self.plant = PlantModel(topo)
        n = topo.n_buildings
        flow_cap = topo.producer.m_dot_max
        self.agents = []
        for i, b in enumerate(topo.buildings):
            if n == 1:
                kind = "solo"
            elif i == 0:
                kind = "head"
            elif i == n - 1:
                kind = "tail"
            else:
                kind = "middle"
            self.agents.append(
                BuildingAgent(
                    b, topo.fluid, spec, kind,
                    m_user_max=max_user_flow(b, topo.fluid),
                    flow_cap=flow_cap, solver_tol=solver_tol,
                )
            )
        self.coordinator = AdmmCoordinator(self.agents, consensus_pairs_for_chain(list(topo.names)), admm_params)
        self._prev_state: AdmmState | None = None

    def step(
        self,
        t: float,
        x: np.ndarray,
        producer_temp_now: float,
        producer_flow_now: float,
        time_step: int = 0,
        last_flows=None,
    ) -> tuple[list[float], dict]:
        knots = self.spec.disc.K + 1
        T_set, T_amb = self.profiles.sample(t, self.spec.disc.T_s, knots)
        for i, agent in enumerate(self.agents):
            meas = _measured_building_state(self.plant, x, i)
            boundary_flow = boundary_temp = None
            if agent.kind in ("head", "solo"):
                boundary_flow = np.full(knots, float(producer_flow_now))
                boundary_temp = np.full(knots, float(producer_temp_now))
            agent.set_step_data(meas, T_set, T_amb, boundary_flow, boundary_temp)

        if self._prev_state is None:
            measured = self._measured_pair_values(x, last_flows)
            state = self.coordinator.cold_start(measured, knots)
        else:
            state = self.coordinator.warm_start(self._prev_state)
            for agent in self.agents:
                agent.shift_guess()

        result = self.coordinator.coordinate(state, time_step=time_step)
        self._prev_state = state
        requests = [result.controls[name] for name in self.topo.names]
        head_sol = result.solutions.get(self.topo.names[0], {})
        intake = float(head_sol["feed_in_flow"][0]) if "feed_in_flow" in head_sol else sum(requests)
        info = {
            "converged": result.converged,
            "iterations": result.iterations,
            "residual": result.residual,
            "telemetry": result.telemetry,
            "solutions": result.solutions,
            "intake_request": intake,
        }
        return requests, info

    def _measured_pair_values(self, x: np.ndarray, last_flows) -> dict[tuple[str, str], float]:
        """Flat cold-start copies: trunk temperatures from the measured state,
        flows from the previously applied allocation. Before anything has
        flowed there is no flow measurement, so flow pairs stay unset and
        their consensus terms only engage after the first exchange."""
        values: dict[tuple[str, str], float] = {}
        names = self.topo.names
        for i, up in enumerate(names[:-1]):
            down = names[i + 1]
            T_F_up = float(x[self.plant.state_index(i, "T_F")])
            T_R_down = float(x[self.plant.state_index(i + 1, "T_R")])
            values[(up, "feed_out_temp")] = T_F_up
            values[(down, "feed_in_temp")] = T_F_up
            values[(down, "return_out_temp")] = T_R_down
            values[(up, "return_in_temp")] = T_R_down
            if last_flows is not None:
                m_out = float(last_flows.m_outlet[i])
                m_ret = float(last_flows.m_return[i + 1])
                values[(up, "feed_out_flow")] = m_out
                values[(down, "feed_in_flow")] = m_out
                values[(down, "return_out_flow")] = m_ret
                values[(up, "return_in_flow")] = m_ret
        return values
