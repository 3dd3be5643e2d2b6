"""Graph-based physical model of a parallel-configuration district heating network.

A single heat producer feeds a chain of buildings through per-building feed
trunk segments; each building draws water through a user branch (hot pipe S1,
heat exchanger S2, cold pipe S3) and returns it to per-building return trunk
segments. Unused flow at the end of the chain recirculates through a bypass
pipe. All temperatures are in Kelvin, flows in kg/s, SI units throughout;
degree-Celsius conversion happens only at the configuration/CSV boundary.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

__all__ = [
    "ModelEvaluationError",
    "FluidProps",
    "PipeRole",
    "PipeSegment",
    "BuildingParams",
    "BuildingState",
    "FlowPort",
    "HeatProducerParams",
    "NetworkTopology",
    "pipe_thermal_rhs",
    "ambient_loss",
    "return_mixing",
    "exchanger_extraction",
    "building_thermal_rhs",
    "node_mass_balance",
    "darcy_pressure_drop",
    "hydraulic_coefficient",
    "max_user_flow",
]

#: Sanity floor for temperatures; rejects accidental degree-Celsius inputs.
TEMP_FLOOR_K = 200.0


class ModelEvaluationError(ValueError):
    """Raised when a model right-hand side is evaluated on invalid inputs."""


class PipeRole(enum.Enum):
    """Hydraulic role of a lumped pipe segment."""

    FEED = "F"
    S1 = "S1"
    S2 = "S2"
    S3 = "S3"
    RETURN = "R"
    BYPASS = "B"


@dataclass(frozen=True)
class FluidProps:
    """Thermo-hydraulic properties of the network fluid.

    Parameters
    ----------
    rho : float
        Density in kg/m^3.
    cp : float
        Specific heat capacity in J/(kg K).
    f_darcy : float
        Darcy friction factor (dimensionless, fully turbulent regime).
    """

    rho: float
    cp: float
    f_darcy: float

    def __post_init__(self):
        if not (self.rho > 0 and self.cp > 0 and self.f_darcy > 0):
            raise ValueError("fluid properties must be strictly positive")


@dataclass(frozen=True)
class PipeSegment:
    """Lumped pipe segment with derived geometry.

    Parameters
    ----------
    role : PipeRole
        Position of the segment in the building plumbing.
    length : float
        Pipe length in m.
    diameter : float
        Inner diameter in m.
    heat_transfer_coeff : float
        Convective coefficient to ambient (or to the building for the
        exchanger segment) in W/(m^2 K).
    """

    role: PipeRole
    length: float
    diameter: float
    heat_transfer_coeff: float

    def __post_init__(self):
        if self.length <= 0 or self.diameter <= 0:
            raise ValueError(f"{self.role}: length and diameter must be positive")
        if self.heat_transfer_coeff < 0:
            raise ValueError(f"{self.role}: heat transfer coefficient must be >= 0")

    @property
    def volume(self) -> float:
        """Fluid volume pi*D^2/4*L in m^3."""
        return math.pi * self.diameter**2 / 4.0 * self.length

    @property
    def surface(self) -> float:
        """Lateral surface pi*D*L in m^2."""
        return math.pi * self.diameter * self.length

    @property
    def ua(self) -> float:
        """Heat transfer conductance h*A in W/K."""
        return self.heat_transfer_coeff * self.surface

    def thermal_mass(self, fluid: FluidProps) -> float:
        """Thermal capacity rho*cp*V of the contained fluid in J/K."""
        return fluid.rho * fluid.cp * self.volume


@dataclass(frozen=True)
class BuildingParams:
    """Per-building physical parameters: envelope, exchanger and pipes.

    ``bypass`` must be present exactly on the building that terminates the
    branch (enforced by :class:`NetworkTopology`).
    """

    name: str
    heat_capacity: float       # C_b, J/K
    envelope_surface: float    # A_b, m^2
    envelope_coeff: float      # h_b, W/(m^2 K)
    feed_trunk: PipeSegment    # F
    s1: PipeSegment
    s2: PipeSegment
    s3: PipeSegment
    return_trunk: PipeSegment  # R
    dp_user_max: float         # Pa, max differential pressure over the user branch
    bypass: PipeSegment | None = None

    def __post_init__(self):
        if self.heat_capacity <= 0 or self.envelope_surface <= 0 or self.envelope_coeff <= 0:
            raise ValueError(f"{self.name}: building envelope parameters must be positive")
        if self.dp_user_max <= 0:
            raise ValueError(f"{self.name}: dp_user_max must be positive")
        roles = [
            (self.feed_trunk, PipeRole.FEED),
            (self.s1, PipeRole.S1),
            (self.s2, PipeRole.S2),
            (self.s3, PipeRole.S3),
            (self.return_trunk, PipeRole.RETURN),
        ]
        for seg, want in roles:
            if seg.role is not want:
                raise ValueError(f"{self.name}: segment in slot {want} has role {seg.role}")
        if self.bypass is not None and self.bypass.role is not PipeRole.BYPASS:
            raise ValueError(f"{self.name}: bypass segment must have the bypass role")

    @property
    def envelope_ua(self) -> float:
        """Envelope conductance h_b*A_b in W/K."""
        return self.envelope_coeff * self.envelope_surface


@dataclass(frozen=True)
class BuildingState:
    """Lumped temperatures of one building's branch and mass, in K.

    ``T_F``/``T_R`` (feed and return trunk temperatures) are carried by the
    extended variant used by the distributed controller and the plant;
    ``T_B`` only exists on the bypass building.
    """

    T_S1: float
    T_S2: float
    T_S3: float
    T_b: float
    T_F: float | None = None
    T_R: float | None = None
    T_B: float | None = None

    def __post_init__(self):
        for label in ("T_S1", "T_S2", "T_S3", "T_b", "T_F", "T_R", "T_B"):
            v = getattr(self, label)
            if v is None:
                continue
            if not math.isfinite(v) or v <= TEMP_FLOOR_K:
                raise ValueError(f"{label}={v!r}: temperature must be finite and > {TEMP_FLOOR_K} K")


@dataclass(frozen=True)
class FlowPort:
    """A (mass flow, temperature) pair at a hydraulic junction."""

    m_dot: float  # kg/s
    T: float      # K

    def __post_init__(self):
        if self.m_dot < 0:
            raise ValueError(f"mass flow must be nonnegative, got {self.m_dot}")


@dataclass(frozen=True)
class HeatProducerParams:
    """Heat producer limits and supervisory-controller settings.

    The producer reacts proportionally: it lowers its feed temperature when
    the return stream comes back above ``return_temp_setpoint`` and lowers
    its mass flow output when more than ``bypass_flow_threshold`` is being
    discarded through the bypass.
    """

    m_dot_max: float = 15.0              # kg/s
    T_F_min: float = 273.15 + 30.0       # K
    T_F_max: float = 273.15 + 80.0       # K
    return_temp_setpoint: float = 273.15 + 40.0  # K
    bypass_flow_threshold: float = 0.5   # kg/s
    temp_gain: float = 0.5               # K of feed correction per K of return error
    flow_gain: float = 1.0               # kg/s of output correction per kg/s of excess bypass
    initial_T_F: float = 273.15 + 70.0   # K, feed temperature before the first update
    #: output before the first update; the demand floor lifts it instantly,
    #: so a small value avoids flooding the bypass on startup
    initial_m_dot: float = 2.0           # kg/s

    def __post_init__(self):
        if not self.T_F_min < self.T_F_max:
            raise ValueError("producer temperature band is empty")
        if self.m_dot_max <= 0:
            raise ValueError("producer maximum flow must be positive")


@dataclass(frozen=True)
class NetworkTopology:
    """Ordered chain of buildings behind one heat producer.

    The head building is hydraulically adjacent to the producer; the tail
    building carries the bypass. Predecessor/successor relations follow the
    chain order.
    """

    buildings: tuple[BuildingParams, ...]
    producer: HeatProducerParams
    fluid: FluidProps
    names: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        if len(self.buildings) < 1:
            raise ValueError("topology needs at least one building")
        for i, b in enumerate(self.buildings):
            is_tail = i == len(self.buildings) - 1
            if is_tail and b.bypass is None:
                raise ValueError(f"tail building {b.name} must carry the bypass")
            if not is_tail and b.bypass is not None:
                raise ValueError(f"only the tail building may carry a bypass, not {b.name}")
        names = tuple(b.name for b in self.buildings)
        if len(set(names)) != len(names):
            raise ValueError("building names must be unique")
        object.__setattr__(self, "names", names)

    @property
    def n_buildings(self) -> int:
        return len(self.buildings)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def predecessor(self, name: str) -> str | None:
        i = self.index(name)
        return self.names[i - 1] if i > 0 else None

    def successor(self, name: str) -> str | None:
        i = self.index(name)
        return self.names[i + 1] if i < len(self.names) - 1 else None

    def building(self, name: str) -> BuildingParams:
        return self.buildings[self.index(name)]


def pipe_thermal_rhs(
    seg: PipeSegment,
    fluid: FluidProps,
    T: float,
    inflow_enthalpy: float,
    m_dot_out: float,
    Q_dot: float,
) -> float:
    """Temperature rate of a lumped pipe segment, in K/s.

    Energy balance of the contained fluid::

        rho*cp*V * dT/dt = inflow_enthalpy - m_dot_out*cp*T - Q_dot

    ``inflow_enthalpy`` is the total incoming enthalpy flux in W (one stream
    ``m_dot*cp*T_in``, or the merged flux of a mixing node), ``Q_dot`` the
    heat leaving through the pipe wall in W.
    """
    if not all(map(math.isfinite, (T, inflow_enthalpy, m_dot_out, Q_dot))):
        raise ModelEvaluationError(
            f"non-finite input to pipe rhs: T={T}, H_in={inflow_enthalpy}, "
            f"m_out={m_dot_out}, Q={Q_dot}"
        )
    if m_dot_out < 0:
        raise ModelEvaluationError(f"outflow must be nonnegative, got {m_dot_out}")
    return (inflow_enthalpy - m_dot_out * fluid.cp * T - Q_dot) / (seg.thermal_mass(fluid))


def ambient_loss(seg: PipeSegment, T: float, T_amb: float) -> float:
    """Convective heat loss h*A*(T - T_amb) to ambient, in W.

    Negative when the pipe is colder than ambient.
    """
    return seg.ua * (T - T_amb)


def return_mixing(user_out: FlowPort, succ_return: FlowPort, fluid: FluidProps) -> tuple[float, float]:
    """Merge the user branch outlet with the successor's return stream.

    Returns the combined inflow enthalpy in W and the merged mass flow in
    kg/s, feeding the return trunk segment.
    """
    enthalpy = user_out.m_dot * fluid.cp * user_out.T + succ_return.m_dot * fluid.cp * succ_return.T
    return enthalpy, user_out.m_dot + succ_return.m_dot


def exchanger_extraction(seg_s2: PipeSegment, T_S2: float, T_b: float) -> float:
    """Heat extracted from the exchanger segment into the building, in W."""
    if seg_s2.role is not PipeRole.S2:
        raise ValueError(f"extraction is defined on the exchanger segment, got {seg_s2.role}")
    return seg_s2.ua * (T_S2 - T_b)


def building_thermal_rhs(b: BuildingParams, T_S2: float, T_b: float, T_amb: float) -> float:
    """Building temperature rate: exchanger gain minus envelope loss, in K/s."""
    gain = exchanger_extraction(b.s2, T_S2, T_b)
    loss = b.envelope_ua * (T_b - T_amb)
    return (gain - loss) / b.heat_capacity


def node_mass_balance(inflows, outflows) -> float:
    """Mass conservation residual sum(in) - sum(out) at a node, in kg/s."""
    return math.fsum(inflows) - math.fsum(outflows)


def hydraulic_coefficient(seg: PipeSegment, fluid: FluidProps) -> float:
    """Darcy-Weisbach coefficient k with dp = k*m_dot^2, in Pa s^2/kg^2."""
    return fluid.f_darcy * 8.0 * seg.length / (fluid.rho * math.pi**2 * seg.diameter**5)


def darcy_pressure_drop(seg: PipeSegment, fluid: FluidProps, m_dot: float) -> float:
    """Turbulent pressure drop over a pipe segment, in Pa."""
    if m_dot < 0:
        raise ValueError(f"mass flow must be nonnegative, got {m_dot}")
    return hydraulic_coefficient(seg, fluid) * m_dot**2

def max_user_flow(b: BuildingParams, fluid: FluidProps) -> float:
    """Largest user flow the branch admits under the pressure limit, in kg/s.

    Inverts the pressure-drop law on the exchanger segment, which dominates
    the branch hydraulic resistance by two orders of magnitude.
    """
    return math.sqrt(b.dp_user_max / hydraulic_coefficient(b.s2, fluid))
