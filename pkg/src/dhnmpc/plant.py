"""Full-network plant: state layout, algebraic hydraulics and implicit stepping.

The plant state stacks, per building, the lumped temperatures
``[T_F, T_S1, T_S2, T_S3, T_b, T_R]`` in chain order, followed by the bypass
temperature ``T_B`` of the tail building. Mass flows are algebraic: given the
granted user flows and the producer output they follow from node mass
balances exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .integrator import implicit_step
from .network import (
    FlowPort,
    NetworkTopology,
    ambient_loss,
    building_thermal_rhs,
    exchanger_extraction,
    pipe_thermal_rhs,
    return_mixing,
)

__all__ = ["STATE_LABELS", "PlantControls", "FlowSet", "PlantModel", "resolve_flows"]

STATE_LABELS = ("T_F", "T_S1", "T_S2", "T_S3", "T_b", "T_R")
STATES_PER_BUILDING = len(STATE_LABELS)


@dataclass(frozen=True)
class PlantControls:
    """Flows and producer outputs held constant over one plant step."""

    m_user: tuple[float, ...]  # granted user flows per building, kg/s
    m_producer: float          # producer output flow, kg/s
    T_producer: float          # producer feed temperature, K


@dataclass(frozen=True)
class FlowSet:
    """All network mass flows implied by the controls, kg/s."""

    m_user: tuple[float, ...]
    m_feed: tuple[float, ...]    # flow through each building's feed trunk
    m_outlet: tuple[float, ...]  # flow passed on to the successor (tail: bypass)
    m_return: tuple[float, ...]  # flow through each building's return trunk
    m_bypass: float


def resolve_flows(topo: NetworkTopology, m_user, m_producer: float) -> FlowSet:
    """Propagate the producer flow through the chain by mass conservation.

    Raises if the granted user flows overdraw the feed at any junction.
    """
    n = topo.n_buildings
    m_user = tuple(float(m) for m in m_user)
    if len(m_user) != n:
        raise ValueError(f"expected {n} user flows, got {len(m_user)}")
    m_feed, m_outlet = [], []
    carry = float(m_producer)
    for i, m_u in enumerate(m_user):
        if m_u < 0:
            raise ValueError(f"user flow {i} is negative: {m_u}")
        if m_u > carry + 1e-12:
            raise ValueError(
                f"building {topo.names[i]} draws {m_u} kg/s but only {carry} kg/s arrives"
            )
        m_feed.append(carry)
        carry = carry - m_u
        m_outlet.append(carry)
    m_bypass = m_outlet[-1]
    m_ret = [0.0] * n
    acc = m_bypass
    for i in range(n - 1, -1, -1):
        acc = m_user[i] + acc
        m_ret[i] = acc
    return FlowSet(
        m_user=m_user,
        m_feed=tuple(m_feed),
        m_outlet=tuple(m_outlet),
        m_return=tuple(m_ret),
        m_bypass=m_bypass,
    )


class PlantModel:
    """Continuous-time thermal dynamics of the whole network.

    Wraps the per-segment energy balances into a stacked right-hand side
    with its analytic state Jacobian, and exposes the implicit trapezoidal
    step used by the closed-loop simulation.
    """

    def __init__(self, topo: NetworkTopology):
        self.topo = topo
        self.n_states = STATES_PER_BUILDING * topo.n_buildings + 1

    def state_index(self, building: int, label: str) -> int:
        return STATES_PER_BUILDING * building + STATE_LABELS.index(label)

    @property
    def bypass_index(self) -> int:
        return self.n_states - 1

    def initial_state(self, per_building: dict[str, float] | list[dict[str, float]], T_bypass: float) -> np.ndarray:
        """Stack per-building temperature dicts into a state vector."""
        if isinstance(per_building, dict):
            per_building = [per_building] * self.topo.n_buildings
        x = np.empty(self.n_states)
        for i, temps in enumerate(per_building):
            for label in STATE_LABELS:
                x[self.state_index(i, label)] = temps[label]
        x[self.bypass_index] = T_bypass
        return x

    def rhs(self, x: np.ndarray, controls: PlantControls, T_amb: float) -> np.ndarray:
        """Stacked dT/dt for the current state, flows and ambient."""
        topo = self.topo
        fluid = topo.fluid
        cp = fluid.cp
        flows = resolve_flows(topo, controls.m_user, controls.m_producer)
        n = topo.n_buildings
        dx = np.empty_like(x)
        T_B = x[self.bypass_index]
        for i, b in enumerate(topo.buildings):
            iF = self.state_index(i, "T_F")
            T_F, T_S1, T_S2, T_S3, T_b, T_R = x[iF : iF + STATES_PER_BUILDING]
            m_u = flows.m_user[i]
            m_f = flows.m_feed[i]
            feed_in_T = controls.T_producer if i == 0 else x[self.state_index(i - 1, "T_F")]
            dx[iF] = pipe_thermal_rhs(
                b.feed_trunk, fluid, T_F, m_f * cp * feed_in_T, m_f, ambient_loss(b.feed_trunk, T_F, T_amb)
            )
            dx[iF + 1] = pipe_thermal_rhs(
                b.s1, fluid, T_S1, m_u * cp * T_F, m_u, ambient_loss(b.s1, T_S1, T_amb)
            )
            dx[iF + 2] = pipe_thermal_rhs(
                b.s2, fluid, T_S2, m_u * cp * T_S1, m_u, exchanger_extraction(b.s2, T_S2, T_b)
            )
            dx[iF + 3] = pipe_thermal_rhs(
                b.s3, fluid, T_S3, m_u * cp * T_S2, m_u, ambient_loss(b.s3, T_S3, T_amb)
            )
            dx[iF + 4] = building_thermal_rhs(b, T_S2, T_b, T_amb)
            if i < n - 1:
                succ = FlowPort(flows.m_return[i + 1], x[self.state_index(i + 1, "T_R")])
            else:
                succ = FlowPort(flows.m_bypass, T_B)
            enthalpy, m_ret = return_mixing(FlowPort(m_u, T_S3), succ, fluid)
            dx[iF + 5] = pipe_thermal_rhs(
                b.return_trunk, fluid, T_R, enthalpy, m_ret, ambient_loss(b.return_trunk, T_R, T_amb)
            )
        tail = topo.buildings[-1]
        T_F_tail = x[self.state_index(n - 1, "T_F")]
        dx[self.bypass_index] = pipe_thermal_rhs(
            tail.bypass, fluid, T_B, flows.m_bypass * cp * T_F_tail, flows.m_bypass,
            ambient_loss(tail.bypass, T_B, T_amb),
        )
        return dx

    def rhs_jacobian(self, x: np.ndarray, controls: PlantControls, T_amb: float) -> np.ndarray:
        """Analytic d(rhs)/d(state); constant in the state for fixed flows."""
        topo = self.topo
        fluid = topo.fluid
        cp = fluid.cp
        flows = resolve_flows(topo, controls.m_user, controls.m_producer)
        n = topo.n_buildings
        J = np.zeros((self.n_states, self.n_states))
        iB = self.bypass_index
        for i, b in enumerate(topo.buildings):
            iF = self.state_index(i, "T_F")
            iS1, iS2, iS3, ib, iR = iF + 1, iF + 2, iF + 3, iF + 4, iF + 5
            m_u = flows.m_user[i]
            m_f = flows.m_feed[i]
            MF = b.feed_trunk.thermal_mass(fluid)
            M1 = b.s1.thermal_mass(fluid)
            M2 = b.s2.thermal_mass(fluid)
            M3 = b.s3.thermal_mass(fluid)
            MR = b.return_trunk.thermal_mass(fluid)
            J[iF, iF] = -(m_f * cp + b.feed_trunk.ua) / MF
            if i > 0:
                J[iF, self.state_index(i - 1, "T_F")] = m_f * cp / MF
            J[iS1, iS1] = -(m_u * cp + b.s1.ua) / M1
            J[iS1, iF] = m_u * cp / M1
            J[iS2, iS2] = -(m_u * cp + b.s2.ua) / M2
            J[iS2, iS1] = m_u * cp / M2
            J[iS2, ib] = b.s2.ua / M2
            J[iS3, iS3] = -(m_u * cp + b.s3.ua) / M3
            J[iS3, iS2] = m_u * cp / M3
            J[ib, iS2] = b.s2.ua / b.heat_capacity
            J[ib, ib] = -(b.s2.ua + b.envelope_ua) / b.heat_capacity
            m_ret = flows.m_return[i]
            J[iR, iR] = -(m_ret * cp + b.return_trunk.ua) / MR
            J[iR, iS3] = m_u * cp / MR
            if i < n - 1:
                J[iR, self.state_index(i + 1, "T_R")] = flows.m_return[i + 1] * cp / MR
            else:
                J[iR, iB] = flows.m_bypass * cp / MR
        tail = topo.buildings[-1]
        MB = tail.bypass.thermal_mass(fluid)
        J[iB, iB] = -(flows.m_bypass * cp + tail.bypass.ua) / MB
        J[iB, self.state_index(n - 1, "T_F")] = flows.m_bypass * cp / MB
        return J

    def step(
        self,
        x: np.ndarray,
        controls: PlantControls,
        T_amb_k: float,
        T_amb_k1: float,
        T_s: float,
        controls_k1: PlantControls | None = None,
        tol: float = 1e-9,
    ) -> np.ndarray:
        """Advance one implicit trapezoidal step of length ``T_s``.

        Controls are held at ``controls`` over the step unless a distinct
        endpoint value ``controls_k1`` is given (used when replaying OCP
        solutions whose transcription evaluates knot controls).
        """
        u_k = (controls, T_amb_k)
        u_k1 = (controls_k1 if controls_k1 is not None else controls, T_amb_k1)
        return implicit_step(
            x, u_k, u_k1,
            rhs=lambda s, u: self.rhs(s, u[0], u[1]),
            rhs_jac=lambda s, u: self.rhs_jacobian(s, u[0], u[1]),
            T_s=T_s, tol=tol,
        )
