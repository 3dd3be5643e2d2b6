"""Closed-loop simulation and control for parallel district heating networks.

The package couples a lumped thermal/hydraulic plant model of a producer
feeding a chain of buildings with two receding-horizon controllers: fully
independent per-building MPC, and consensus-coordinated distributed MPC
where neighbours exchange shared feed/return trajectories until their
copies agree.
"""

from .admm import AdmmCoordinator, AdmmParams, AdmmState, ConsensusPair
from .controllers import DecMpcController, DmpcController, Profiles
from .integrator import DiscretizationSpec, trapezoidal_residual
from .metrics import EfficiencyReport, buildings_power, efficiency, producer_power
from .network import (
    BuildingParams,
    BuildingState,
    FlowPort,
    FluidProps,
    HeatProducerParams,
    NetworkTopology,
    PipeRole,
    PipeSegment,
    max_user_flow,
)
from .ocp import DecisionLayout, OcpSpec, ReferenceBundle, assemble_dec_ocp, assemble_dmpc_ocp
from .plant import PlantControls, PlantModel, resolve_flows
from .simulate import (
    ProfileSpec,
    ScenarioConfig,
    SimulationTrace,
    allocate_scarce_flow,
    ambient_profile,
    producer_supervisor,
    run_closed_loop,
    setpoint_profile,
)
from .solver import NlpProblem, SolveReport, SolverTolerances, check_gradients, solve

__version__ = "0.1.0"
