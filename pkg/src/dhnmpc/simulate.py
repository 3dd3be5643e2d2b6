"""Closed-loop receding-horizon engine.

Per sample: update profiles, invoke the configured controller, run the heat
producer's supervisory rules, allocate the (possibly scarce) producer flow
upstream-first, advance the plant one implicit step, and record everything
into the simulation trace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .admm import AdmmParams
from .controllers import DecMpcController, DmpcController, Profiles
from .integrator import StepFailure
from .network import FlowPort, HeatProducerParams, NetworkTopology
from .ocp import OcpSpec
from .plant import PlantControls, PlantModel, resolve_flows
from .solver import SolverTolerances

__all__ = [
    "KELVIN",
    "ProfileSpec",
    "ScenarioConfig",
    "SimulationTrace",
    "SimulationError",
    "ambient_profile",
    "setpoint_profile",
    "producer_supervisor",
    "allocate_scarce_flow",
    "run_closed_loop",
]

KELVIN = 273.15
_DAY = 86400.0


def ambient_profile(kind: str, t: float, constant: float = KELVIN - 5.0) -> float:
    """Ambient temperature forecast in K at absolute time ``t``.

    ``half_sine`` sweeps from -5 degC at midnight to +5 degC at noon and
    back; ``constant`` returns the given value.
    """
    if kind == "constant":
        return constant
    if kind == "half_sine":
        return (KELVIN - 5.0) + 10.0 * math.sin(math.pi * (t % _DAY) / _DAY)
    raise ValueError(f"unknown ambient profile {kind!r}")


def setpoint_profile(kind: str, t: float, constant: float = KELVIN + 18.0) -> float:
    """Indoor setpoint in K: constant, or 18/23 degC night-setback schedule.

    The setback keeps 18 degC from 18:00 to 06:00 and 23 degC during the
    day, repeating every 24 h.
    """
    if kind == "constant":
        return constant
    if kind == "night_setback":
        hour = (t % _DAY) / 3600.0
        return KELVIN + (23.0 if 6.0 <= hour < 18.0 else 18.0)
    raise ValueError(f"unknown setpoint profile {kind!r}")


@dataclass(frozen=True)
class ProfileSpec:
    """Serializable profile choice; ``value`` only applies to ``constant``."""

    kind: str
    value: float = KELVIN - 5.0

    def as_callable(self, which: str):
        if which == "ambient":
            return lambda t: ambient_profile(self.kind, t, self.value)
        return lambda t: setpoint_profile(self.kind, t, self.value)


@dataclass
class ScenarioConfig:
    """Everything one closed-loop run needs."""

    name: str
    topology: NetworkTopology
    mode: str                      # dec | dmpc
    ocp: OcpSpec                   # weights for the active mode
    admm: AdmmParams
    T_total: float                 # simulation length, s
    initial_temps: list[dict[str, float]]   # per building, keys T_F..T_R in K
    initial_bypass_temp: float
    ambient: ProfileSpec
    setpoint: ProfileSpec
    solver_tol: SolverTolerances = field(default_factory=SolverTolerances)
    plant_substeps: int = 1

    def __post_init__(self):
        T_s = self.ocp.disc.T_s
        if self.T_total < 0 or abs(self.T_total / T_s - round(self.T_total / T_s)) > 1e-9:
            raise ValueError("simulation length must be a nonnegative multiple of the sample time")
        if self.mode not in ("dec", "dmpc"):
            raise ValueError(f"unknown controller mode {self.mode!r}")
        if self.plant_substeps < 1:
            raise ValueError("plant_substeps must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.T_total / self.ocp.disc.T_s))


@dataclass
class SimulationTrace:
    """Time-indexed closed-loop record; one row per knot, N+1 rows.

    Flow and producer columns hold the values applied over the interval
    starting at the row's time; the final row repeats the last interval.
    """

    topology: NetworkTopology
    t: np.ndarray
    states: np.ndarray           # (N+1, n_states)
    requests: np.ndarray         # (N+1, n) controller-requested user flows
    m_user: np.ndarray           # (N+1, n) granted user flows
    m_feed: np.ndarray
    m_outlet: np.ndarray
    m_return: np.ndarray
    m_bypass: np.ndarray
    producer_T: np.ndarray
    producer_m: np.ndarray
    T_amb: np.ndarray
    T_set: np.ndarray
    admm_iterations: np.ndarray
    admm_residual: np.ndarray
    controller_ok: np.ndarray
    power_producer: np.ndarray
    power_buildings: np.ndarray
    admm_telemetry: list = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return self.t.size

    def state(self, row: int, building: int, label: str) -> float:
        plant = PlantModel(self.topology)
        return float(self.states[row, plant.state_index(building, label)])


class SimulationError(RuntimeError):
    """Closed loop aborted; carries the partial trace for post-mortem."""

    def __init__(self, message: str, partial: SimulationTrace | None):
        super().__init__(message)
        self.partial = partial


def producer_supervisor(
    return_port: FlowPort,
    bypass_flow: float,
    params: HeatProducerParams,
    prev_T_F: float,
    prev_m_F: float,
    demand: float,
) -> tuple[float, float]:
    """Supervisory update of the producer outputs.

    A hot return lowers the feed temperature proportionally; excess bypass
    flow lowers the output flow. The output always covers the aggregate
    request up to the hardware cap, so scarcity only appears at the cap.
    """
    if not all(map(math.isfinite, (return_port.T, bypass_flow, prev_T_F, prev_m_F, demand))):
        raise ValueError("non-finite supervisor input")
    T_F = prev_T_F - params.temp_gain * (return_port.T - params.return_temp_setpoint)
    T_F = min(max(T_F, params.T_F_min), params.T_F_max)
    m_F = prev_m_F - params.flow_gain * (bypass_flow - params.bypass_flow_threshold)
    lower = min(demand, params.m_dot_max)
    m_F = min(max(m_F, lower), params.m_dot_max)
    return T_F, m_F


def allocate_scarce_flow(requests, available: float) -> list[float]:
    """Grant requested flows upstream-first from the available producer flow.

    Upstream valves physically extract flow before it reaches downstream
    users, so under scarcity the head of the chain is served first; whatever
    remains at the tail spills into the bypass.
    """
    granted = []
    remaining = float(available)
    for r in requests:
        if r < 0:
            raise ValueError(f"negative flow request {r}")
        g = min(float(r), remaining)
        granted.append(g)
        remaining -= g
    return granted


def _build_controller(cfg: ScenarioConfig, profiles: Profiles):
    if cfg.mode == "dec":
        return DecMpcController(cfg.topology, cfg.ocp, profiles, cfg.solver_tol)
    return DmpcController(cfg.topology, cfg.ocp, cfg.admm, profiles, cfg.solver_tol)


def run_closed_loop(cfg: ScenarioConfig) -> SimulationTrace:
    """Simulate the configured scenario and return the complete trace.

    Controller hard failures and plant step failures abort with a
    :class:`SimulationError` carrying the partial trace.
    """
    topo = cfg.topology
    plant = PlantModel(topo)
    n = topo.n_buildings
    T_s = cfg.ocp.disc.T_s
    N = cfg.n_steps

    amb = cfg.ambient.as_callable("ambient")
    setp = cfg.setpoint.as_callable("setpoint")
    profiles = Profiles(T_set=setp, T_amb=amb)
    controller = _build_controller(cfg, profiles)

    x = plant.initial_state(cfg.initial_temps, cfg.initial_bypass_temp)
    prod_T = topo.producer.initial_T_F
    prod_m = topo.producer.initial_m_dot
    prev_bypass = topo.producer.bypass_flow_threshold  # neutral first correction
    last_flows = None

    rows: list[dict] = []

    def record(t, flows, requests, prod_T, prod_m, info):
        cp = topo.fluid.cp
        if flows is None:
            p_hp = 0.0
            p_b = 0.0
            flows_rec = dict(
                m_user=[0.0] * n, m_feed=[0.0] * n, m_outlet=[0.0] * n,
                m_return=[0.0] * n, m_bypass=0.0,
            )
        else:
            T_R_head = x[plant.state_index(0, "T_R")]
            p_hp = flows.m_feed[0] * cp * prod_T - flows.m_return[0] * cp * T_R_head
            p_b = sum(
                b.s2.ua * (x[plant.state_index(i, "T_S2")] - x[plant.state_index(i, "T_b")])
                for i, b in enumerate(topo.buildings)
            )
            flows_rec = dict(
                m_user=list(flows.m_user), m_feed=list(flows.m_feed),
                m_outlet=list(flows.m_outlet), m_return=list(flows.m_return),
                m_bypass=flows.m_bypass,
            )
        rows.append(
            dict(
                t=t, states=x.copy(), requests=list(requests), prod_T=prod_T, prod_m=prod_m,
                T_amb=amb(t), T_set=setp(t),
                admm_iterations=info.get("iterations", 0), admm_residual=info.get("residual", 0.0),
                ok=info.get("converged", True), p_hp=p_hp, p_b=p_b, **flows_rec,
            )
        )

    def finalize() -> SimulationTrace:
        def col(key):
            return np.array([r[key] for r in rows])

        return SimulationTrace(
            topology=topo,
            t=col("t"),
            states=np.vstack([r["states"] for r in rows]) if rows else np.zeros((0, plant.n_states)),
            requests=col("requests"),
            m_user=col("m_user"),
            m_feed=col("m_feed"),
            m_outlet=col("m_outlet"),
            m_return=col("m_return"),
            m_bypass=col("m_bypass"),
            producer_T=col("prod_T"),
            producer_m=col("prod_m"),
            T_amb=col("T_amb"),
            T_set=col("T_set"),
            admm_iterations=col("admm_iterations"),
            admm_residual=col("admm_residual"),
            controller_ok=col("ok"),
            power_producer=col("p_hp"),
            power_buildings=col("p_b"),
            admm_telemetry=telemetry,
        )

    telemetry: list = []
    info: dict = {}
    flows = None
    requests = [0.0] * n

    for k in range(N):
        t = k * T_s
        try:
            if cfg.mode == "dec":
                requests, info = controller.step(t, x)
            else:
                requests, info = controller.step(
                    t, x, prod_T, prod_m, time_step=k, last_flows=last_flows
                )
                telemetry.extend(info.get("telemetry", []))
        except Exception as exc:  # noqa: BLE001 - controller hard failure
            raise SimulationError(f"controller failed at t={t:.0f}s: {exc}", finalize()) from exc

        T_R_head = float(x[plant.state_index(0, "T_R")])
        demand = info.get("intake_request", sum(requests)) if cfg.mode == "dmpc" else sum(requests)
        prod_T, prod_m = producer_supervisor(
            FlowPort(m_dot=prod_m, T=T_R_head), prev_bypass, topo.producer,
            prod_T, prod_m, demand=demand,
        )
        granted = allocate_scarce_flow(requests, prod_m)
        flows = resolve_flows(topo, granted, prod_m)
        record(t, flows, requests, prod_T, prod_m, info)

        controls = PlantControls(tuple(granted), prod_m, prod_T)
        try:
            h = T_s / cfg.plant_substeps
            for j in range(cfg.plant_substeps):
                x = plant.step(x, controls, amb(t + j * h), amb(t + (j + 1) * h), h)
        except StepFailure as exc:
            raise SimulationError(f"plant step failed at t={t:.0f}s: {exc}", finalize()) from exc

        prev_bypass = flows.m_bypass
        last_flows = flows

    # terminal row: state at T, last interval's flows repeated
    record(N * T_s, flows, requests, prod_T, prod_m, info)
    return finalize()
