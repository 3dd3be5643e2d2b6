"""Numerical hygiene oracles: gradient checks, conservation audits and the
convex-instance consensus oracle.

These run both from the command line (``selfcheck``) and inside the test
suite. Everything is deterministic; "arbitrary" evaluation points come from
a fixed quasi-random pattern, not an RNG.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .admm import AdmmCoordinator, AdmmParams, ConsensusPair
from .controllers import BuildingAgent, consensus_pairs_for_chain
from .network import NetworkTopology, darcy_pressure_drop, max_user_flow
from .ocp import (
    OcpSpec,
    ReferenceBundle,
    assemble_centralized_temperature_ocp,
    assemble_dec_ocp,
    assemble_dmpc_ocp,
)
from .plant import resolve_flows
from .simulate import KELVIN
from .solver import NlpProblem, SolverTolerances, check_gradients, solve

__all__ = [
    "CheckResult",
    "probe_point",
    "oracle_spec",
    "gradient_check_suite",
    "roundtrip_check",
    "convex_consensus_check",
    "reduced_kkt_check",
]


@dataclass
class CheckResult:
    name: str
    value: float
    limit: float

    @property
    def passed(self) -> bool:
        return self.value <= self.limit

    def line(self) -> str:
        mark = "ok " if self.passed else "FAIL"
        return f"[{mark}] {self.name}: {self.value:.3e} (limit {self.limit:.1e})"


def probe_point(nlp: NlpProblem, spread: float = 0.37) -> np.ndarray:
    """Deterministic off-guess evaluation point inside the box."""
    wiggle = np.sin(1.7 * np.arange(nlp.n) + 0.3)
    return np.clip(nlp.x0 + spread * wiggle, nlp.lo, nlp.hi)


def _paper_refs(spec: OcpSpec):
    knots = spec.disc.K + 1
    return ReferenceBundle(
        T_set=np.full(knots, KELVIN + 18.0),
        T_amb=np.full(knots, KELVIN - 5.0),
    )


def oracle_spec(disc) -> OcpSpec:
    """Canonical convex-instance weights: production loss weights with a
    moderate comfort weight, so the consensus iteration converges in a
    test-friendly number of sweeps."""
    return OcpSpec(disc, 1e3, {"F": 0.8, "S1": 0.01, "S3": 0.01, "R": 0.8, "B": 3e4}, 20.0)


def gradient_check_suite(topo: NetworkTopology, dec_spec: OcpSpec, dmpc_spec: OcpSpec) -> list[CheckResult]:
    """Finite-difference checks on every assembled OCP flavour."""
    results = []
    fluid = topo.fluid
    knots = dec_spec.disc.K + 1
    m_max = max_user_flow(topo.buildings[0], fluid)
    x0_dec = {"T_S1": KELVIN + 25, "T_S2": KELVIN + 23, "T_S3": KELVIN + 22, "T_b": KELVIN + 16}
    refs = _paper_refs(dec_spec)
    dec = assemble_dec_ocp(
        topo.buildings[0], fluid, dec_spec, x0_dec, refs, KELVIN + 40, m_max
    )
    results.append(CheckResult("gradcheck dec", check_gradients(dec.nlp, probe_point(dec.nlp)), 1e-5))

    refs_d = _paper_refs(dmpc_spec)
    x0_dm = dict(x0_dec, T_feed=KELVIN + 40, T_return=KELVIN + 25, T_bypass=KELVIN + 10)
    copies_all = {
        "feed_in_flow": np.full(knots, 5.0), "feed_in_temp": np.full(knots, KELVIN + 39),
        "return_out_flow": np.full(knots, 4.0), "return_out_temp": np.full(knots, KELVIN + 24),
        "feed_out_flow": np.full(knots, 3.0), "feed_out_temp": np.full(knots, KELVIN + 38),
        "return_in_flow": np.full(knots, 2.0), "return_in_temp": np.full(knots, KELVIN + 23),
    }
    for kind, shared in (("head", ("feed_out", "return_in")), ("middle", None), ("tail", ("feed_in", "return_out"))):
        if shared is None:
            copies = dict(copies_all)
        else:
            copies = {k: v for k, v in copies_all.items() if k.startswith(shared)}
        duals = {k: np.full(knots, 0.3) for k in copies}
        damping = {k: (6e5 if "flow" in k else 1.5e5) for k in copies}
        refs_k = ReferenceBundle(refs_d.T_set, refs_d.T_amb, copies, duals, damping)
        ocp = assemble_dmpc_ocp(
            topo.buildings[1 if kind == "middle" else (0 if kind == "head" else 2)],
            fluid, dmpc_spec, kind, x0_dm, refs_k, m_max, topo.producer.m_dot_max,
            producer_flow=np.full(knots, 6.0), producer_temp=np.full(knots, KELVIN + 55),
        )
        results.append(
            CheckResult(f"gradcheck dmpc {kind}", check_gradients(ocp.nlp, probe_point(ocp.nlp)), 1e-5)
        )
    return results


def roundtrip_check(topo: NetworkTopology) -> CheckResult:
    """Pressure-drop / max-flow inverse identity on the governing segment."""
    b = topo.buildings[0]
    m = max_user_flow(b, topo.fluid)
    dp = darcy_pressure_drop(b.s2, topo.fluid, m)
    rel = abs(dp - b.dp_user_max) / b.dp_user_max
    return CheckResult("dp/flow round trip", rel, 1e-9)


def _frozen_flow_setup(topo: NetworkTopology, spec: OcpSpec):
    knots = spec.disc.K + 1
    m_user = (1.0, 1.0, 1.0)
    flows = resolve_flows(topo, m_user, 3.5)
    x0 = []
    for i in range(topo.n_buildings):
        x0.append({
            "T_feed": KELVIN + 38 - i, "T_S1": KELVIN + 30, "T_S2": KELVIN + 26,
            "T_S3": KELVIN + 24, "T_b": KELVIN + 16 + 0.5 * i, "T_return": KELVIN + 24,
            "T_bypass": KELVIN + 15,
        })
    refs = _paper_refs(spec)
    producer_temp = np.full(knots, KELVIN + 45.0)
    return m_user, flows, x0, refs, producer_temp


def convex_consensus_check(
    topo: NetworkTopology,
    spec: OcpSpec,
    admm: AdmmParams | None = None,
    solver_tol: SolverTolerances = SolverTolerances(),
) -> tuple[CheckResult, dict]:
    """Frozen-flow temperature consensus against the centralized optimum.

    With all mass flows pinned the per-building problems are convex QPs and
    the network-wide problem has a unique optimum; the consensus iteration
    must land on it in every shared trajectory.
    """
    if admm is None:
        # production springs converge too slowly on a pure QP; the oracle
        # uses a light damping with a near-critical dual step
        admm = AdmmParams(
            alpha_temp=900.0, alpha_flow=900.0, delta_temp=1e3, delta_flow=1e3,
            i_max=900, eps=2e-4,
        )
    fluid = topo.fluid
    knots = spec.disc.K + 1
    m_user, flows, x0, refs, producer_temp = _frozen_flow_setup(topo, spec)
    m_max = max_user_flow(topo.buildings[0], fluid)

    central = assemble_centralized_temperature_ocp(
        list(topo.buildings), fluid, spec, x0, refs, flows, producer_temp
    )
    rep = solve(central.nlp, solver_tol)
    ctr = central.trajectories(rep.x)

    agents = []
    kinds = ["head", "middle", "tail"]
    frozen = [
        {"feed_in_flow": flows.m_feed[0], "m_user": m_user[0],
         "feed_out_flow": flows.m_outlet[0], "return_in_flow": flows.m_return[1]},
        {"feed_in_flow": flows.m_feed[1], "m_user": m_user[1],
         "feed_out_flow": flows.m_outlet[1], "return_in_flow": flows.m_return[2],
         "return_out_flow": flows.m_return[1]},
        {"feed_in_flow": flows.m_feed[2], "m_user": m_user[2],
         "m_bypass": flows.m_bypass, "return_out_flow": flows.m_return[2]},
    ]
    for i, b in enumerate(topo.buildings):
        agent = BuildingAgent(
            b, fluid, spec, kinds[i], m_max, topo.producer.m_dot_max, solver_tol,
            frozen_flows={k: np.full(knots, v) for k, v in frozen[i].items()},
        )
        agent.set_step_data(
            x0[i], refs.T_set, refs.T_amb,
            producer_flow=np.full(knots, 3.5) if i == 0 else None,
            producer_temp=producer_temp if i == 0 else None,
        )
        agents.append(agent)
    pairs = consensus_pairs_for_chain(list(topo.names))
    coord = AdmmCoordinator(agents, pairs, admm)
    measured = {}
    for i, up in enumerate(topo.names[:-1]):
        down = topo.names[i + 1]
        measured[(up, "feed_out_temp")] = x0[i]["T_feed"]
        measured[(down, "feed_in_temp")] = x0[i]["T_feed"]
        measured[(down, "return_out_temp")] = x0[i + 1]["T_return"]
        measured[(up, "return_in_temp")] = x0[i + 1]["T_return"]
        measured[(up, "feed_out_flow")] = flows.m_outlet[i]
        measured[(down, "feed_in_flow")] = flows.m_outlet[i]
        measured[(down, "return_out_flow")] = flows.m_return[i + 1]
        measured[(up, "return_in_flow")] = flows.m_return[i + 1]
    state = coord.cold_start(measured, knots)
    result = coord.coordinate(state)

    pairs_err = {}
    worst = 0.0
    mapping = [
        ("A", "feed_out_temp", "A.T_feed"), ("B", "feed_in_temp", "A.T_feed"),
        ("B", "feed_out_temp", "B.T_feed"), ("C", "feed_in_temp", "B.T_feed"),
        ("B", "return_out_temp", "B.T_return"), ("A", "return_in_temp", "B.T_return"),
        ("C", "return_out_temp", "C.T_return"), ("B", "return_in_temp", "C.T_return"),
    ]
    for agent_name, var, central_name in mapping:
        got = result.solutions[agent_name][var]
        want = ctr[central_name]
        err = float(np.max(np.abs(got - want)))
        pairs_err[f"{agent_name}.{var}"] = err
        worst = max(worst, err)
    detail = {
        "iterations": result.iterations,
        "residual": result.residual,
        "central_status": rep.status,
        "errors": pairs_err,
    }
    return CheckResult("consensus vs centralized QP", worst, 1e-3), detail


def reduced_kkt_check(solver_tol: SolverTolerances = SolverTolerances()) -> CheckResult:
    """Two-variable equality-constrained QP against its hand-derived KKT point.

    minimize  q1*(x1-a)^2 + q2*(x2-b)^2   s.t.  x1 - x2 = d

    Stationarity gives x1 = (q1*a + q2*(b+d))/(q1+q2) and x2 = x1 - d.
    """
    q1, q2, a, b, d = 2.0, 3.0, 1.0, 4.0, 0.5
    x1_star = (q1 * a + q2 * (b + d)) / (q1 + q2)
    x2_star = x1_star - d

    def cost_and_grad(z):
        f = q1 * (z[0] - a) ** 2 + q2 * (z[1] - b) ** 2
        return f, np.array([2 * q1 * (z[0] - a), 2 * q2 * (z[1] - b)])

    nlp = NlpProblem(
        n=2, cost_and_grad=cost_and_grad,
        lo=np.array([-10.0, -10.0]), hi=np.array([10.0, 10.0]), x0=np.zeros(2),
        c_eq=lambda z: np.array([z[0] - z[1] - d]),
        c_jac=lambda z: np.array([[1.0, -1.0]]),
    )
    rep = solve(nlp, solver_tol)
    err = float(max(abs(rep.x[0] - x1_star), abs(rep.x[1] - x2_star)))
    return CheckResult("reduced 2-var KKT", err, 1e-6)
