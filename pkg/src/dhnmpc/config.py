"""Scenario configuration: TOML parsing, defaults layering and validation.

Scenario files carry physical units in their key names (``length_m``,
``temp_C``); all values are converted to SI/Kelvin here, the only place
degree-Celsius offsets appear. A scenario may name an ``include`` file
(typically the bundled parameter defaults) whose sections it overrides
key by key.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .admm import AdmmParams
from .integrator import DiscretizationSpec
from .network import (
    BuildingParams,
    FluidProps,
    HeatProducerParams,
    NetworkTopology,
    PipeRole,
    PipeSegment,
)
from .ocp import OcpSpec
from .simulate import KELVIN, ProfileSpec, ScenarioConfig
from .solver import SolverTolerances

__all__ = ["ConfigError", "ParsedScenario", "parse_config"]

_ROLE_BY_LABEL = {
    "F": PipeRole.FEED, "S1": PipeRole.S1, "S2": PipeRole.S2,
    "S3": PipeRole.S3, "R": PipeRole.RETURN, "B": PipeRole.BYPASS,
}

_SCHEMA = {
    "include": str,
    "name": str,
    "fluid": {"density_kg_m3": float, "heat_capacity_J_kgK": float, "darcy_friction": float},
    "pipes": {
        label: {"length_m": float, "diameter_m": float, "heat_transfer_W_m2K": float}
        for label in _ROLE_BY_LABEL
    },
    "building": {
        "heat_capacity_MJ_K": float,
        "envelope_surface_m2": float,
        "envelope_coeff_W_m2K": float,
        "dp_user_max_Pa": float,
    },
    "producer": {
        "max_flow_kg_s": float,
        "min_temp_C": float,
        "max_temp_C": float,
        "return_setpoint_C": float,
        "bypass_threshold_kg_s": float,
        "temp_gain": float,
        "flow_gain": float,
        "initial_temp_C": float,
        "initial_flow_kg_s": float,
    },
    "horizon": {"sample_time_min": float, "steps": int},
    "weights": {
        "dec": {"discomfort": float, "loss_S1": float, "loss_S3": float, "pumping": float},
        "dmpc": {
            "discomfort": float, "loss_F": float, "loss_S1": float, "loss_S3": float,
            "loss_R": float, "loss_B": float, "pumping": float,
        },
    },
    "admm": {
        "alpha_temp": float, "alpha_flow": float, "delta_temp": float, "delta_flow": float,
        "max_iterations": int, "tolerance": float, "norm": str,
        "residual_scale_temp": float, "residual_scale_flow": float, "jacobi": bool,
    },
    "buildings": {"names": list},
    "simulation": {"mode": str, "duration_h": float, "plant_substeps": int},
    "profiles": {
        "ambient": {"kind": str, "value_C": float},
        "setpoint": {"kind": str, "value_C": float},
    },
    "initial": {
        "building_temps_C": list,
        "feed_pipes_C": (float, list),
        "branch_pipes_C": (float, list),
        "return_pipes_C": (float, list),
        "bypass_C": float,
    },
    "solver": {"eq_tol": float, "kkt_tol": float, "sqp_maxiter": int},
}


class ConfigError(ValueError):
    """Configuration file rejected; the message names the offending key."""


@dataclass
class ParsedScenario:
    """A validated scenario plus the bookkeeping the CLI needs."""

    config: ScenarioConfig
    checksum: str
    sources: list[str]
    raw: dict


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _validate(tree: dict, schema: dict, path: str = "") -> None:
    for key, value in tree.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown key {here!r}")
        expected = schema[key]
        if isinstance(expected, tuple):
            if isinstance(value, list) and list in expected:
                continue
            if isinstance(value, (int, float)) and not isinstance(value, bool) and float in expected:
                continue
            raise ConfigError(f"{here!r} must be a number or a list")
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here!r} must be a table")
            _validate(value, expected, here)
        elif expected is float:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{here!r} must be a number")
        elif expected is int:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{here!r} must be an integer")
        elif expected is bool:
            if not isinstance(value, bool):
                raise ConfigError(f"{here!r} must be a boolean")
        elif expected is list:
            if not isinstance(value, list):
                raise ConfigError(f"{here!r} must be a list")
        elif expected is str:
            if not isinstance(value, str):
                raise ConfigError(f"{here!r} must be a string")


def _need(tree: dict, path: str):
    node = tree
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"missing required field {path!r}")
        node = node[part]
    return node


def _pipe(tree: dict, label: str) -> PipeSegment:
    t = _need(tree, f"pipes.{label}")
    return PipeSegment(
        role=_ROLE_BY_LABEL[label],
        length=_need(t, "length_m"),
        diameter=_need(t, "diameter_m"),
        heat_transfer_coeff=_need(t, "heat_transfer_W_m2K"),
    )


def parse_config(path: str | Path, mode_override: str | None = None) -> ParsedScenario:
    """Load, layer and validate a scenario file into a ScenarioConfig.

    ``mode_override`` switches the controller backend without touching the
    file. The checksum covers every byte read (scenario plus includes).
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    digest = hashlib.sha256()
    sources = []

    def load(p: Path) -> dict:
        raw_bytes = p.read_bytes()
        digest.update(raw_bytes)
        sources.append(str(p))
        try:
            return tomllib.loads(raw_bytes.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: invalid TOML: {exc}") from exc

    tree = load(path)
    if "include" in tree:
        inc = path.parent / str(tree.pop("include"))
        if not inc.is_file():
            raise ConfigError(f"include file not found: {inc}")
        tree = _deep_merge(load(inc), tree)
    _validate(tree, _SCHEMA)

    fluid = FluidProps(
        rho=_need(tree, "fluid.density_kg_m3"),
        cp=_need(tree, "fluid.heat_capacity_J_kgK"),
        f_darcy=_need(tree, "fluid.darcy_friction"),
    )
    names = _need(tree, "buildings.names")
    if not names or not all(isinstance(n, str) for n in names):
        raise ConfigError("buildings.names must be a non-empty list of strings")

    b_tab = _need(tree, "building")
    segs = {label: _pipe(tree, label) for label in _ROLE_BY_LABEL}
    buildings = []
    for i, name in enumerate(names):
        is_tail = i == len(names) - 1
        buildings.append(
            BuildingParams(
                name=name,
                heat_capacity=_need(b_tab, "heat_capacity_MJ_K") * 1e6,
                envelope_surface=_need(b_tab, "envelope_surface_m2"),
                envelope_coeff=_need(b_tab, "envelope_coeff_W_m2K"),
                feed_trunk=segs["F"], s1=segs["S1"], s2=segs["S2"], s3=segs["S3"],
                return_trunk=segs["R"],
                dp_user_max=_need(b_tab, "dp_user_max_Pa"),
                bypass=segs["B"] if is_tail else None,
            )
        )

    p_tab = _need(tree, "producer")
    producer = HeatProducerParams(
        m_dot_max=_need(p_tab, "max_flow_kg_s"),
        T_F_min=_need(p_tab, "min_temp_C") + KELVIN,
        T_F_max=_need(p_tab, "max_temp_C") + KELVIN,
        return_temp_setpoint=_need(p_tab, "return_setpoint_C") + KELVIN,
        bypass_flow_threshold=_need(p_tab, "bypass_threshold_kg_s"),
        temp_gain=_need(p_tab, "temp_gain"),
        flow_gain=_need(p_tab, "flow_gain"),
        initial_T_F=_need(p_tab, "initial_temp_C") + KELVIN,
        initial_m_dot=_need(p_tab, "initial_flow_kg_s"),
    )
    topo = NetworkTopology(tuple(buildings), producer, fluid)

    disc = DiscretizationSpec(
        T_s=_need(tree, "horizon.sample_time_min") * 60.0,
        K=_need(tree, "horizon.steps"),
    )
    mode = mode_override or _need(tree, "simulation.mode")
    if mode not in ("dec", "dmpc"):
        raise ConfigError(f"simulation.mode must be 'dec' or 'dmpc', got {mode!r}")
    if mode == "dec":
        w = _need(tree, "weights.dec")
        ocp = OcpSpec(
            disc,
            Q_discomfort=_need(w, "discomfort"),
            Q_loss={"S1": _need(w, "loss_S1"), "S3": _need(w, "loss_S3")},
            R_pump=_need(w, "pumping"),
        )
    else:
        w = _need(tree, "weights.dmpc")
        ocp = OcpSpec(
            disc,
            Q_discomfort=_need(w, "discomfort"),
            Q_loss={
                "F": _need(w, "loss_F"), "S1": _need(w, "loss_S1"),
                "S3": _need(w, "loss_S3"), "R": _need(w, "loss_R"),
                "B": _need(w, "loss_B"),
            },
            R_pump=_need(w, "pumping"),
        )

    a_tab = tree.get("admm", {})
    admm = AdmmParams(
        alpha_temp=a_tab.get("alpha_temp", 0.05),
        alpha_flow=a_tab.get("alpha_flow", 0.2),
        delta_temp=a_tab.get("delta_temp", 1.5e5),
        delta_flow=a_tab.get("delta_flow", 6.0e5),
        i_max=a_tab.get("max_iterations", 60),
        eps=a_tab.get("tolerance", 1.0),
        norm=a_tab.get("norm", "l2"),
        residual_scale_temp=a_tab.get("residual_scale_temp", 1.0),
        residual_scale_flow=a_tab.get("residual_scale_flow", 1.0),
        jacobi=a_tab.get("jacobi", False),
    )
    if admm.norm not in ("l2", "linf"):
        raise ConfigError(f"admm.norm must be 'l2' or 'linf', got {admm.norm!r}")

    init = _need(tree, "initial")
    temps_c = _need(init, "building_temps_C")
    if len(temps_c) != len(names):
        raise ConfigError(
            f"initial.building_temps_C has {len(temps_c)} entries for {len(names)} buildings"
        )

    def per_building(key: str) -> list[float]:
        v = _need(init, key)
        if isinstance(v, list):
            if len(v) != len(names):
                raise ConfigError(f"initial.{key} has {len(v)} entries for {len(names)} buildings")
            return [float(x) for x in v]
        return [float(v)] * len(names)

    feed_c = per_building("feed_pipes_C")
    branch_c = per_building("branch_pipes_C")
    ret_c = per_building("return_pipes_C")
    initial_temps = [
        {
            "T_F": feed_c[i] + KELVIN,
            "T_S1": branch_c[i] + KELVIN,
            "T_S2": branch_c[i] + KELVIN,
            "T_S3": branch_c[i] + KELVIN,
            "T_b": t_c + KELVIN,
            "T_R": ret_c[i] + KELVIN,
        }
        for i, t_c in enumerate(temps_c)
    ]

    prof = _need(tree, "profiles")
    amb_tab = _need(prof, "ambient")
    set_tab = _need(prof, "setpoint")
    ambient = ProfileSpec(_need(amb_tab, "kind"), amb_tab.get("value_C", -5.0) + KELVIN)
    setpoint = ProfileSpec(_need(set_tab, "kind"), set_tab.get("value_C", 18.0) + KELVIN)
    if ambient.kind not in ("constant", "half_sine"):
        raise ConfigError(f"profiles.ambient.kind must be constant or half_sine")
    if setpoint.kind not in ("constant", "night_setback"):
        raise ConfigError(f"profiles.setpoint.kind must be constant or night_setback")

    s_tab = tree.get("solver", {})
    solver_tol = SolverTolerances(
        eq_tol=s_tab.get("eq_tol", 1e-6),
        kkt_tol=s_tab.get("kkt_tol", 1e-6),
        sqp_maxiter=s_tab.get("sqp_maxiter", 300),
    )

    cfg = ScenarioConfig(
        name=tree.get("name", path.stem),
        topology=topo,
        mode=mode,
        ocp=ocp,
        admm=admm,
        T_total=_need(tree, "simulation.duration_h") * 3600.0,
        initial_temps=initial_temps,
        initial_bypass_temp=_need(init, "bypass_C") + KELVIN,
        ambient=ambient,
        setpoint=setpoint,
        solver_tol=solver_tol,
        plant_substeps=tree.get("simulation", {}).get("plant_substeps", 1),
    )
    return ParsedScenario(
        config=cfg, checksum=digest.hexdigest(), sources=sources, raw=tree
    )
