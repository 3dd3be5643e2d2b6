"""Per-building finite-horizon optimal control problems.

Builds the decentralized and the distributed (consensus-augmented) MPC
problems as generic NLP instances: trapezoidal transcription of the thermal
dynamics, node mass balances as linear equalities, quadratic comfort /
loss / pumping costs, and the linear-plus-damped consensus penalty on
shared variables. All derivatives are analytic; finite differences exist
only as a checking oracle in the solver module.

Temperatures are knot variables; every mass flow is held piecewise constant
over each step, so the residual of interval ``k`` evaluates the dynamics at
both knot states with the interval's flow. Flow trajectories still carry
K+1 entries (matching the exchanged consensus copies); their final entry is
tied to the previous one, the same constant extension the receding-horizon
shift uses.

Decision trajectories are named by what they carry:

======================  =====================================================
``T_S1 T_S2 T_S3 T_b``  private branch and building temperatures
``m_user``              user valve flow (the control)
``T_feed T_return``     own feed / return trunk pipe temperatures
``T_bypass m_bypass``   bypass pipe temperature and slack flow (tail only)
``feed_in_flow/temp``   stream received from the predecessor
``return_out_flow/temp``own return stream handed to the predecessor
``feed_out_flow/temp``  own stream passed on to the successor
``return_in_flow/temp`` successor's return stream received back
======================  =====================================================
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .integrator import DiscretizationSpec
from .network import BuildingParams, FluidProps
from .solver import NlpProblem

__all__ = [
    "AssemblyError",
    "OcpSpec",
    "ReferenceBundle",
    "DecisionLayout",
    "OcpProblem",
    "PRIVATE_VARS",
    "SHARED_WITH_PRED",
    "SHARED_WITH_SUCC",
    "stage_cost_dec",
    "stage_cost_dmpc",
    "admm_penalty",
    "assemble_dec_ocp",
    "assemble_dmpc_ocp",
    "assemble_centralized_temperature_ocp",
]

PRIVATE_VARS = ("T_S1", "T_S2", "T_S3", "T_b", "m_user")
SHARED_WITH_PRED = ("feed_in_flow", "feed_in_temp", "return_out_flow", "return_out_temp")
SHARED_WITH_SUCC = ("feed_out_flow", "feed_out_temp", "return_in_flow", "return_in_temp")

# generous sanity box for temperature decision variables, K
T_VAR_LO = 273.15 - 60.0
T_VAR_HI = 273.15 + 140.0


class AssemblyError(ValueError):
    """Raised when an OCP cannot be assembled from the given data."""


@dataclass(frozen=True)
class OcpSpec:
    """Weights and horizon of one building's optimal control problem.

    ``Q_loss`` maps segment labels (``F S1 S3 R B``) to efficiency weights;
    the decentralized cost reads only ``S1``/``S3``.
    """

    disc: DiscretizationSpec
    Q_discomfort: float
    Q_loss: dict[str, float]
    R_pump: float

    def __post_init__(self):
        if self.Q_discomfort <= 0:
            raise ValueError("discomfort weight must be positive")
        if self.R_pump < 0 or any(w < 0 for w in self.Q_loss.values()):
            raise ValueError("weights must be nonnegative")


@dataclass
class ReferenceBundle:
    """Exogenous trajectories and consensus data for one solve.

    ``copies`` holds the neighbours' trajectories for each shared local
    variable, ``duals`` the signed multiplier trajectories (the coordinator
    applies the pair orientation), ``damping`` the quadratic coefficients.
    """

    T_set: np.ndarray
    T_amb: np.ndarray
    copies: dict[str, np.ndarray] = field(default_factory=dict)
    duals: dict[str, np.ndarray] = field(default_factory=dict)
    damping: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class DecisionLayout:
    """Index map from named trajectories to slices of the flat vector."""

    names: tuple[str, ...]
    K: int

    @property
    def knots(self) -> int:
        return self.K + 1

    @property
    def n(self) -> int:
        return len(self.names) * self.knots

    def sl(self, name: str) -> slice:
        i = self.names.index(name)
        return slice(i * self.knots, (i + 1) * self.knots)

    def unpack(self, z: np.ndarray) -> dict[str, np.ndarray]:
        return {name: z[self.sl(name)] for name in self.names}

    def pack(self, trajectories: dict[str, np.ndarray]) -> np.ndarray:
        z = np.empty(self.n)
        for name in self.names:
            z[self.sl(name)] = trajectories[name]
        return z


def stage_cost_dec(traj: dict[str, np.ndarray], refs: ReferenceBundle, spec: OcpSpec) -> float:
    """Full-horizon decentralized cost: discomfort + branch losses + pumping."""
    d = spec.Q_discomfort * (traj["T_b"] - refs.T_set) ** 2
    e = sum(spec.Q_loss[s] * (traj[f"T_{s}"] - refs.T_amb) ** 2 for s in ("S1", "S3"))
    c = spec.R_pump * traj["m_user"] ** 2
    return float(np.sum(d + e + c))


def stage_cost_dmpc(
    traj: dict[str, np.ndarray], refs: ReferenceBundle, spec: OcpSpec, has_bypass: bool
) -> float:
    """Distributed cost: loss term extended over trunk (and bypass) pipes."""
    d = spec.Q_discomfort * (traj["T_b"] - refs.T_set) ** 2
    e = spec.Q_loss["F"] * (traj["T_feed"] - refs.T_amb) ** 2
    e = e + sum(spec.Q_loss[s] * (traj[f"T_{s}"] - refs.T_amb) ** 2 for s in ("S1", "S3"))
    e = e + spec.Q_loss["R"] * (traj["T_return"] - refs.T_amb) ** 2
    if has_bypass:
        e = e + spec.Q_loss["B"] * (traj["T_bypass"] - refs.T_amb) ** 2
    c = spec.R_pump * traj["m_user"] ** 2
    return float(np.sum(d + e + c))


def admm_penalty(
    traj: dict[str, np.ndarray],
    copies: dict[str, np.ndarray],
    duals: dict[str, np.ndarray],
    damping: dict[str, float],
) -> float:
    """Consensus penalty: linear dual terms plus damped quadratic deviation."""
    total = 0.0
    for name, xhat in copies.items():
        dev = traj[name] - xhat
        total += float(duals[name] @ dev + 0.5 * damping[name] * (dev @ dev))
    return total


class _Builder:
    """Accumulates variables, dynamics, equalities and cost terms, then
    closes over them to produce an :class:`NlpProblem` with analytic
    derivatives.

    Dynamics right-hand sides are knot-local functions of the trajectory
    dict; the builder evaluates each interval's residual at both knot
    states with the interval's (piecewise-constant) flow values. Exogenous
    signals are registered once and sliced consistently.
    """

    def __init__(self, disc: DiscretizationSpec):
        self.disc = disc
        self.K = disc.K
        self.knots = disc.K + 1
        self._names: list[str] = []
        self._controls: set[str] = set()
        self._lo: dict[str, np.ndarray] = {}
        self._hi: dict[str, np.ndarray] = {}
        self._guess: dict[str, np.ndarray] = {}
        self._exo: dict[str, tuple[np.ndarray, bool]] = {}  # name -> (values, per_interval)
        # (state, rhs_fn(tr) -> (f, partials), bilinear second-order terms)
        self._dynamics: list[tuple[str, Callable, list]] = []
        self._linear: list[tuple[dict[str, float], np.ndarray]] = []
        self._quad: list[tuple[str, float, np.ndarray]] = []
        self._lin_cost: list[tuple[str, np.ndarray]] = []
        self._const_cost = 0.0

    def var(self, name: str, lo: float, hi: float, guess, control: bool = False) -> None:
        self._names.append(name)
        if control:
            self._controls.add(name)
        self._lo[name] = np.full(self.knots, float(lo))
        self._hi[name] = np.full(self.knots, float(hi))
        self._guess[name] = (
            np.full(self.knots, float(guess))
            if np.isscalar(guess)
            else np.asarray(guess, dtype=float).copy()
        )

    def exo(self, name: str, values, per_interval: bool = False) -> None:
        """Register an exogenous signal: sampled at knots, or constant per
        interval (producer outputs change only at sample instants)."""
        values = np.broadcast_to(np.asarray(values, dtype=float), (self.knots,)).copy()
        self._exo[name] = (values, per_interval)

    def pin(self, name: str, k: int, value: float) -> None:
        if not np.isfinite(value):
            raise AssemblyError(f"cannot pin {name}[{k}] to non-finite value {value}")
        self._lo[name][k] = value
        self._hi[name][k] = value
        self._guess[name][k] = value

    def freeze(self, name: str, values: np.ndarray) -> None:
        values = np.broadcast_to(np.asarray(values, dtype=float), (self.knots,))
        self._lo[name] = values.copy()
        self._hi[name] = values.copy()
        self._guess[name] = values.copy()

    def dynamics(self, state: str, rhs_fn: Callable, bilinear: list | None = None) -> None:
        """Register one state's dynamics. ``bilinear`` lists the constant
        mixed second derivatives of the rhs as ``(var_a, var_b, coeff)``
        triples (the rhs terms are products flow*temperature, so these are
        the only curvature the transcription carries)."""
        self._dynamics.append((state, rhs_fn, bilinear or []))

    def linear_eq(self, coeffs: dict[str, float], rhs=0.0) -> None:
        rhs = np.broadcast_to(np.asarray(rhs, dtype=float), (self.knots,)).copy()
        self._linear.append((coeffs, rhs))

    def quad_cost(self, name: str, weight: float, ref) -> None:
        if weight == 0.0:
            return
        ref = np.broadcast_to(np.asarray(ref, dtype=float), (self.knots,)).copy()
        self._quad.append((name, float(weight), ref))

    def lin_cost(self, name: str, coeff: np.ndarray, const: float = 0.0) -> None:
        self._lin_cost.append((name, np.asarray(coeff, dtype=float).copy()))
        self._const_cost += const

    def rollout_guess(self) -> None:
        """Make the initial guess dynamics-consistent.

        Propagates the registered dynamics knot by knot under the guessed
        flow values (Newton on each implicit transition), then fills the
        definitional per-knot equalities. Starting on the feasible manifold
        keeps the SQP out of the spurious zero-flow basin that feasibility
        restoration from a flat guess falls into.
        """
        dyn_states = [s for s, _, _ in self._dynamics]
        T_half = 0.5 * self.disc.T_s

        def view_at(k: int, overrides: dict[str, float] | None = None) -> dict:
            out = {}
            for name in self._names:
                out[name] = np.array([self._guess[name][k]])
            for name, (vals, per_interval) in self._exo.items():
                out[name] = np.array([vals[k]])
            if overrides:
                for name, v in overrides.items():
                    out[name] = np.array([v])
            return out

        for k in range(self.K):
            start = view_at(k)
            f0 = {}
            for state, rhs_fn, _ in self._dynamics:
                f0[state] = float(rhs_fn(start)[0][0])
            y = np.array([self._guess[s][k] for s in dyn_states])
            x_k = y.copy()
            for _ in range(12):
                over = dict(zip(dyn_states, y))
                # controls keep their interval-k values in the end evaluation
                end = view_at(k, over)
                exo_k1 = {
                    name: np.array([vals[k if per_interval else k + 1]])
                    for name, (vals, per_interval) in self._exo.items()
                }
                end.update(exo_k1)
                res = np.empty(len(dyn_states))
                jac = np.eye(len(dyn_states))
                for si, (state, rhs_fn, _) in enumerate(self._dynamics):
                    f1, partials = rhs_fn(end)
                    res[si] = y[si] - x_k[si] - T_half * (f0[state] + float(f1[0]))
                    for name, p in partials.items():
                        if name in dyn_states:
                            jac[si, dyn_states.index(name)] -= T_half * float(p[0])
                if float(np.max(np.abs(res))) <= 1e-10:
                    break
                y = y - np.linalg.solve(jac, res)
            for si, s in enumerate(dyn_states):
                if self._lo[s][k + 1] != self._hi[s][k + 1]:
                    self._guess[s][k + 1] = y[si]

        # definitional equalities: first-named variable defined by the rest
        for coeffs, rhs in self._linear:
            names = list(coeffs)
            defined = names[0]
            if np.all(self._lo[defined] == self._hi[defined]):
                continue
            val = rhs.copy()
            for n in names[1:]:
                val = val - coeffs[n] * self._guess[n]
            self._guess[defined] = np.clip(val / coeffs[defined], self._lo[defined], self._hi[defined])

    def _eval_views(self, tr: dict[str, np.ndarray], end: bool) -> dict[str, np.ndarray]:
        """Trajectory views for the start/end evaluation of each interval:
        states at knots k (or k+1), flows and interval-exogenous signals at
        their interval index k."""
        view: dict[str, np.ndarray] = {}
        for name in self._names:
            x = tr[name]
            view[name] = x[:-1] if (name in self._controls or not end) else x[1:]
        for name, (vals, per_interval) in self._exo.items():
            view[name] = vals[:-1] if (per_interval or not end) else vals[1:]
        return view

    def build(self) -> tuple[NlpProblem, DecisionLayout]:
        # every flow keeps K+1 entries for exchange symmetry; the last one is
        # tied to its predecessor (constant extension), unless frozen
        ties = [
            name for name in sorted(self._controls)
            if self._lo[name][self.K] != self._hi[name][self.K]
        ]

        layout = DecisionLayout(tuple(self._names), self.K)
        K, knots = self.K, self.knots
        T_half = 0.5 * self.disc.T_s
        lo = np.concatenate([self._lo[n] for n in layout.names])
        hi = np.concatenate([self._hi[n] for n in layout.names])
        x0 = np.concatenate([self._guess[n] for n in layout.names])
        if not np.all(np.isfinite(x0)):
            raise AssemblyError("initial guess contains non-finite entries")

        quad = [(layout.sl(n), w, r) for n, w, r in self._quad]
        lin = [(layout.sl(n), c) for n, c in self._lin_cost]
        const_cost = self._const_cost
        dynamics = list(self._dynamics)
        controls = set(self._controls)
        n_dyn_rows = K * len(dynamics)
        n_lin_rows = knots * len(self._linear)
        m_rows = n_dyn_rows + n_lin_rows + len(ties)

        # constant Jacobian block of the per-knot linear equalities and ties
        J_tail = np.zeros((n_lin_rows + len(ties), layout.n))
        lin_rhs = np.zeros(n_lin_rows)
        for g, (coeffs, rhs) in enumerate(self._linear):
            rows = np.arange(g * knots, (g + 1) * knots)
            lin_rhs[rows] = rhs
            for name, c in coeffs.items():
                cols = np.arange(layout.sl(name).start, layout.sl(name).stop)
                J_tail[rows, cols] = c
        for j, name in enumerate(ties):
            s0 = layout.sl(name).start
            J_tail[n_lin_rows + j, s0 + K] = 1.0
            J_tail[n_lin_rows + j, s0 + K - 1] = -1.0
        lin_coeffs = [(g, coeffs) for g, (coeffs, _) in enumerate(self._linear)]
        eval_views = self._eval_views

        # c_eq and c_jac are called back-to-back at the same point by the
        # solver; share the rhs evaluations between them
        cache: dict = {"key": None}

        def evals(z: np.ndarray):
            key = z.tobytes()
            if cache["key"] != key:
                tr = layout.unpack(z)
                start = eval_views(tr, end=False)
                end = eval_views(tr, end=True)
                cache["data"] = (tr, [
                    (rhs_fn(start), rhs_fn(end)) for _, rhs_fn, _ in dynamics
                ])
                cache["key"] = key
            return cache["data"]

        def cost_and_grad(z: np.ndarray):
            f = const_cost
            g = np.zeros(layout.n)
            for sl, w, ref in quad:
                dev = z[sl] - ref
                f += w * float(dev @ dev)
                g[sl] += 2.0 * w * dev
            for sl, c in lin:
                f += float(c @ z[sl])
                g[sl] += c
            return f, g

        def c_eq(z: np.ndarray) -> np.ndarray:
            tr, data = evals(z)
            out = np.empty(m_rows)
            for j, (state, _, _) in enumerate(dynamics):
                x = tr[state]
                (f0, _), (f1, _) = data[j]
                out[j * K : (j + 1) * K] = x[1:] - x[:-1] - T_half * (f0 + f1)
            base = n_dyn_rows
            for g_i, coeffs in lin_coeffs:
                acc = -lin_rhs[g_i * knots : (g_i + 1) * knots]
                for name, c in coeffs.items():
                    acc = acc + c * tr[name]
                out[base + g_i * knots : base + (g_i + 1) * knots] = acc
            for j, name in enumerate(ties):
                out[n_dyn_rows + n_lin_rows + j] = tr[name][K] - tr[name][K - 1]
            return out

        def c_jac(z: np.ndarray) -> np.ndarray:
            _, data = evals(z)
            J = np.zeros((m_rows, layout.n))
            J[n_dyn_rows:, :] = J_tail
            rows = np.arange(K)
            for j, (state, _, _) in enumerate(dynamics):
                r0 = j * K
                (_, p0), (_, p1) = data[j]
                s0 = layout.sl(state).start
                J[r0 + rows, s0 + rows] += -1.0
                J[r0 + rows, s0 + rows + 1] += 1.0
                for name, p in p0.items():
                    c0 = layout.sl(name).start
                    J[r0 + rows, c0 + rows] += -T_half * p
                for name, p in p1.items():
                    c0 = layout.sl(name).start
                    off = 0 if name in controls else 1
                    J[r0 + rows, c0 + rows + off] += -T_half * p
            return J

        def c_hess_vec(z: np.ndarray, y: np.ndarray) -> np.ndarray:
            H = np.zeros((layout.n, layout.n))
            rows = np.arange(K)
            for j, (_, _, bilinear) in enumerate(dynamics):
                if not bilinear:
                    continue
                y_rows = y[j * K : (j + 1) * K]
                for va, vb, coeff in bilinear:
                    a0 = layout.sl(va).start
                    b0 = layout.sl(vb).start
                    for end in (False, True):
                        ia = a0 + rows + (0 if (va in controls or not end) else 1)
                        ib = b0 + rows + (0 if (vb in controls or not end) else 1)
                        vals = -T_half * y_rows * coeff
                        H[ia, ib] += vals
                        H[ib, ia] += vals
            return H

        obj_scale = max(
            [1.0]
            + [2.0 * w for _, w, _ in self._quad]
            + [float(np.max(np.abs(c))) for _, c in self._lin_cost if c.size],
        )
        hess_diag = np.zeros(layout.n)
        for sl, w, _ in quad:
            hess_diag[sl] += 2.0 * w

        nlp = NlpProblem(
            n=layout.n, cost_and_grad=cost_and_grad, lo=lo, hi=hi, x0=np.clip(x0, lo, hi),
            c_eq=c_eq if m_rows else None, c_jac=c_jac if m_rows else None,
            objective_scale=obj_scale, cost_hess_diag=hess_diag,
            c_hess_vec=c_hess_vec if m_rows else None,
        )
        return nlp, layout


@dataclass
class OcpProblem:
    """An assembled NLP together with its trajectory layout."""

    nlp: NlpProblem
    layout: DecisionLayout
    building: str
    mode: str  # dec | dmpc | centralized

    def trajectories(self, z: np.ndarray) -> dict[str, np.ndarray]:
        return self.layout.unpack(z)


def _check_initial(x0: dict[str, float], required) -> None:
    for k in required:
        if k not in x0 or not np.isfinite(x0[k]):
            raise AssemblyError(f"initial condition {k} missing or non-finite: {x0.get(k)!r}")


def _branch_dynamics(bld: _Builder, b: BuildingParams, fluid: FluidProps, feed_temp: str):
    """User branch S1 -> S2 -> S3 plus the building mass.

    ``feed_temp`` names the variable or exogenous signal supplying the S1
    inlet temperature.
    """
    cp = fluid.cp
    M1, M2, M3 = (s.thermal_mass(fluid) for s in (b.s1, b.s2, b.s3))
    ua1, ua2, ua3 = b.s1.ua, b.s2.ua, b.s3.ua
    feed_is_var = feed_temp in bld._names

    def f_S1(tr):
        m, T_in, T, amb = tr["m_user"], tr[feed_temp], tr["T_S1"], tr["amb"]
        f = (m * cp * (T_in - T) - ua1 * (T - amb)) / M1
        partials = {"m_user": cp * (T_in - T) / M1, "T_S1": -(m * cp + ua1) / M1}
        if feed_is_var:
            partials[feed_temp] = m * cp / M1
        return f, partials

    def f_S2(tr):
        m, T1, T, Tb = tr["m_user"], tr["T_S1"], tr["T_S2"], tr["T_b"]
        f = (m * cp * (T1 - T) - ua2 * (T - Tb)) / M2
        return f, {
            "m_user": cp * (T1 - T) / M2,
            "T_S1": m * cp / M2,
            "T_S2": -(m * cp + ua2) / M2,
            "T_b": ua2 / M2 * np.ones_like(T),
        }

    def f_S3(tr):
        m, T2, T, amb = tr["m_user"], tr["T_S2"], tr["T_S3"], tr["amb"]
        f = (m * cp * (T2 - T) - ua3 * (T - amb)) / M3
        return f, {
            "m_user": cp * (T2 - T) / M3,
            "T_S2": m * cp / M3,
            "T_S3": -(m * cp + ua3) / M3,
        }

    def f_b(tr):
        T2, Tb, amb = tr["T_S2"], tr["T_b"], tr["amb"]
        f = (b.s2.ua * (T2 - Tb) - b.envelope_ua * (Tb - amb)) / b.heat_capacity
        ones = np.ones_like(Tb)
        return f, {
            "T_S2": b.s2.ua / b.heat_capacity * ones,
            "T_b": -(b.s2.ua + b.envelope_ua) / b.heat_capacity * ones,
        }

    bi_S1 = [("m_user", "T_S1", -cp / M1)]
    if feed_is_var:
        bi_S1.append(("m_user", feed_temp, cp / M1))
    bld.dynamics("T_S1", f_S1, bi_S1)
    bld.dynamics("T_S2", f_S2, [("m_user", "T_S1", cp / M2), ("m_user", "T_S2", -cp / M2)])
    bld.dynamics("T_S3", f_S3, [("m_user", "T_S2", cp / M3), ("m_user", "T_S3", -cp / M3)])
    bld.dynamics("T_b", f_b)


def _apply_consensus_terms(bld: _Builder, refs: ReferenceBundle) -> None:
    for name, xhat in refs.copies.items():
        lam = refs.duals[name]
        delta = refs.damping[name]
        bld.quad_cost(name, 0.5 * delta, xhat)
        bld.lin_cost(name, lam, const=-float(np.asarray(lam) @ np.asarray(xhat, dtype=float)))


def assemble_dec_ocp(
    b: BuildingParams,
    fluid: FluidProps,
    spec: OcpSpec,
    x0: dict[str, float],
    refs: ReferenceBundle,
    T_feed_measured: float,
    m_user_max: float,
    x_guess: np.ndarray | None = None,
) -> OcpProblem:
    """Decentralized problem: branch temperatures only, feed held measured.

    The controller has no information channel to the rest of the network,
    so the currently measured feed temperature is assumed constant over the
    horizon.
    """
    _check_initial(x0, ("T_S1", "T_S2", "T_S3", "T_b"))
    if not np.isfinite(T_feed_measured):
        raise AssemblyError("measured feed temperature is non-finite")
    bld = _Builder(spec.disc)
    for name in ("T_S1", "T_S2", "T_S3", "T_b"):
        bld.var(name, T_VAR_LO, T_VAR_HI, x0[name])
        bld.pin(name, 0, x0[name])
    # cold networks want heat: starting with the valve open steers the SQP
    # into the high-flow basin of the (nonconvex) transcription
    cold_guess = m_user_max if x0["T_b"] < refs.T_set[0] else 0.0
    bld.var("m_user", 0.0, m_user_max, cold_guess, control=True)

    bld.exo("amb", refs.T_amb)
    bld.exo("feed_bc", np.full(bld.knots, float(T_feed_measured)))
    _branch_dynamics(bld, b, fluid, "feed_bc")

    bld.quad_cost("T_b", spec.Q_discomfort, refs.T_set)
    bld.quad_cost("T_S1", spec.Q_loss["S1"], refs.T_amb)
    bld.quad_cost("T_S3", spec.Q_loss["S3"], refs.T_amb)
    bld.quad_cost("m_user", spec.R_pump, 0.0)

    if x_guess is None:
        bld.rollout_guess()
    nlp, layout = bld.build()
    if x_guess is not None:
        nlp.x0 = np.clip(np.asarray(x_guess, dtype=float), nlp.lo, nlp.hi)
    return OcpProblem(nlp, layout, b.name, "dec")


def assemble_dmpc_ocp(
    b: BuildingParams,
    fluid: FluidProps,
    spec: OcpSpec,
    kind: str,
    x0: dict[str, float],
    refs: ReferenceBundle,
    m_user_max: float,
    flow_cap: float,
    producer_flow: np.ndarray | None = None,
    producer_temp: np.ndarray | None = None,
    frozen_flows: dict[str, np.ndarray] | None = None,
    x_guess: np.ndarray | None = None,
) -> OcpProblem:
    """Distributed problem for one building of the chain.

    ``kind`` selects the interface structure: the head building exchanges
    with the producer through fixed boundary forecasts and shares only with
    its successor; the tail shares only with its predecessor and carries the
    bypass; middle buildings share both ways; a single-building chain
    (``solo``) combines the producer boundary with the bypass and has no
    shared variables at all. ``frozen_flows`` pins selected flow
    trajectories (used by the convex-instance oracle).
    """
    if kind not in ("head", "middle", "tail", "solo"):
        raise AssemblyError(f"unknown building kind {kind!r}")
    has_pred = kind in ("middle", "tail")
    has_succ = kind in ("head", "middle")
    has_bypass = kind in ("tail", "solo")
    states = ["T_feed", "T_S1", "T_S2", "T_S3", "T_b", "T_return"]
    if has_bypass:
        states.append("T_bypass")
    _check_initial(x0, states)

    bld = _Builder(spec.disc)
    for name in ("T_S1", "T_S2", "T_S3", "T_b"):
        bld.var(name, T_VAR_LO, T_VAR_HI, x0[name])
    cold_guess = min(m_user_max, flow_cap / 3.0) if x0["T_b"] < refs.T_set[0] else 0.0
    bld.var("m_user", 0.0, m_user_max, cold_guess, control=True)
    if has_pred:
        bld.var("feed_in_flow", 0.0, flow_cap, flow_cap / 2.0, control=True)
        bld.var("feed_in_temp", T_VAR_LO, T_VAR_HI, x0["T_feed"])
        bld.var("return_out_flow", 0.0, flow_cap, flow_cap / 2.0, control=True)
        bld.var("return_out_temp", T_VAR_LO, T_VAR_HI, x0["T_return"])
    else:
        # the producer-fed building decides how much flow to request; the
        # producer itself is a reactive device, not a consensus agent
        guess = producer_flow[0] if producer_flow is not None else flow_cap / 2.0
        bld.var("feed_in_flow", 0.0, flow_cap, guess, control=True)
    if has_succ:
        bld.var("feed_out_flow", 0.0, flow_cap, flow_cap / 2.0, control=True)
        bld.var("feed_out_temp", T_VAR_LO, T_VAR_HI, x0["T_feed"])
        bld.var("return_in_flow", 0.0, flow_cap, flow_cap / 2.0, control=True)
        bld.var("return_in_temp", T_VAR_LO, T_VAR_HI, x0["T_return"])
    bld.var("T_feed", T_VAR_LO, T_VAR_HI, x0["T_feed"])
    bld.var("T_return", T_VAR_LO, T_VAR_HI, x0["T_return"])
    if has_bypass:
        bld.var("T_bypass", T_VAR_LO, T_VAR_HI, x0["T_bypass"])
        bld.var("m_bypass", 0.0, flow_cap, 0.5, control=True)
    for name in states:
        bld.pin(name, 0, x0[name])

    cp = fluid.cp
    bld.exo("amb", refs.T_amb)
    MF = b.feed_trunk.thermal_mass(fluid)
    MR = b.return_trunk.thermal_mass(fluid)

    if not has_pred:
        if producer_temp is None:
            raise AssemblyError("building fed by the producer needs a temperature forecast")
        bld.exo("producer_temp", producer_temp, per_interval=True)
        feed_temp_in = "producer_temp"
    else:
        feed_temp_in = "feed_in_temp"

    def f_feed(tr):
        m, T_in, T, amb = tr["feed_in_flow"], tr[feed_temp_in], tr["T_feed"], tr["amb"]
        f = (m * cp * (T_in - T) - b.feed_trunk.ua * (T - amb)) / MF
        partials = {
            "T_feed": -(m * cp + b.feed_trunk.ua) / MF,
            "feed_in_flow": cp * (T_in - T) / MF,
        }
        if has_pred:
            partials["feed_in_temp"] = m * cp / MF
        return f, partials

    ret_flow = "m_bypass" if has_bypass else "return_in_flow"
    ret_temp = "T_bypass" if has_bypass else "return_in_temp"

    def f_return(tr):
        m_u, T3, m_i, T_i, T = tr["m_user"], tr["T_S3"], tr[ret_flow], tr[ret_temp], tr["T_return"]
        amb = tr["amb"]
        f = (m_u * cp * T3 + m_i * cp * T_i - (m_u + m_i) * cp * T - b.return_trunk.ua * (T - amb)) / MR
        return f, {
            "m_user": cp * (T3 - T) / MR,
            "T_S3": m_u * cp / MR,
            ret_flow: cp * (T_i - T) / MR,
            ret_temp: m_i * cp / MR,
            "T_return": -((m_u + m_i) * cp + b.return_trunk.ua) / MR,
        }

    bi_feed = [("feed_in_flow", "T_feed", -cp / MF)]
    if has_pred:
        bi_feed.append(("feed_in_flow", "feed_in_temp", cp / MF))
    bld.dynamics("T_feed", f_feed, bi_feed)
    _branch_dynamics(bld, b, fluid, "T_feed")
    bld.dynamics("T_return", f_return, [
        ("m_user", "T_S3", cp / MR),
        ("m_user", "T_return", -cp / MR),
        (ret_flow, ret_temp, cp / MR),
        (ret_flow, "T_return", -cp / MR),
    ])

    if has_bypass:
        MB = b.bypass.thermal_mass(fluid)

        def f_bypass(tr):
            m, TF, T, amb = tr["m_bypass"], tr["T_feed"], tr["T_bypass"], tr["amb"]
            f = (m * cp * (TF - T) - b.bypass.ua * (T - amb)) / MB
            return f, {
                "m_bypass": cp * (TF - T) / MB,
                "T_feed": m * cp / MB,
                "T_bypass": -(m * cp + b.bypass.ua) / MB,
            }

        bld.dynamics("T_bypass", f_bypass, [
            ("m_bypass", "T_feed", cp / MB),
            ("m_bypass", "T_bypass", -cp / MB),
        ])

    # node mass balances and shared-state identities
    outlet = "m_bypass" if has_bypass else "feed_out_flow"
    bld.linear_eq({outlet: 1.0, "m_user": 1.0, "feed_in_flow": -1.0})
    if has_succ:
        bld.linear_eq({"feed_out_temp": 1.0, "T_feed": -1.0})
    if has_pred:
        bld.linear_eq({"return_out_flow": -1.0, "m_user": 1.0, ret_flow: 1.0})
        bld.linear_eq({"return_out_temp": 1.0, "T_return": -1.0})

    bld.quad_cost("T_b", spec.Q_discomfort, refs.T_set)
    bld.quad_cost("T_feed", spec.Q_loss["F"], refs.T_amb)
    bld.quad_cost("T_S1", spec.Q_loss["S1"], refs.T_amb)
    bld.quad_cost("T_S3", spec.Q_loss["S3"], refs.T_amb)
    bld.quad_cost("T_return", spec.Q_loss["R"], refs.T_amb)
    if has_bypass:
        bld.quad_cost("T_bypass", spec.Q_loss["B"], refs.T_amb)
    bld.quad_cost("m_user", spec.R_pump, 0.0)

    _apply_consensus_terms(bld, refs)

    if frozen_flows:
        for name, values in frozen_flows.items():
            bld.freeze(name, values)

    if x_guess is None:
        bld.rollout_guess()
    nlp, layout = bld.build()
    if x_guess is not None:
        nlp.x0 = np.clip(np.asarray(x_guess, dtype=float), nlp.lo, nlp.hi)
    return OcpProblem(nlp, layout, b.name, "dmpc")


def assemble_centralized_temperature_ocp(
    buildings: list[BuildingParams],
    fluid: FluidProps,
    spec: OcpSpec,
    x0: list[dict[str, float]],
    refs: ReferenceBundle,
    flows,
    producer_temp: np.ndarray,
) -> OcpProblem:
    """Whole-network temperature problem with frozen mass flows.

    With flows fixed the dynamics are linear and the interface temperatures
    couple buildings directly (no consensus copies), giving the convex QP
    whose optimum the consensus iteration must reproduce. ``flows`` is a
    :class:`~dhnmpc.plant.FlowSet`-like object.
    """
    n = len(buildings)
    bld = _Builder(spec.disc)
    cp = fluid.cp

    def v(i: int, name: str) -> str:
        return f"{buildings[i].name}.{name}"

    for i, b in enumerate(buildings):
        names = ["T_feed", "T_S1", "T_S2", "T_S3", "T_b", "T_return"]
        if i == n - 1:
            names.append("T_bypass")
        for name in names:
            bld.var(v(i, name), T_VAR_LO, T_VAR_HI, x0[i][name])
            bld.pin(v(i, name), 0, x0[i][name])

    bld.exo("amb", refs.T_amb)
    bld.exo("producer_temp", producer_temp, per_interval=True)

    for i, b in enumerate(buildings):
        m_f, m_u = float(flows.m_feed[i]), float(flows.m_user[i])
        MF, M1, M2, M3, MR = (
            s.thermal_mass(fluid) for s in (b.feed_trunk, b.s1, b.s2, b.s3, b.return_trunk)
        )

        def f_feed(tr, i=i, b=b, m_f=m_f, MF=MF):
            T = tr[v(i, "T_feed")]
            T_in = tr["producer_temp"] if i == 0 else tr[v(i - 1, "T_feed")]
            f = (m_f * cp * (T_in - T) - b.feed_trunk.ua * (T - tr["amb"])) / MF
            partials = {v(i, "T_feed"): np.full_like(T, -(m_f * cp + b.feed_trunk.ua) / MF)}
            if i > 0:
                partials[v(i - 1, "T_feed")] = np.full_like(T, m_f * cp / MF)
            return f, partials

        def f_S1(tr, i=i, b=b, m_u=m_u, M1=M1):
            T_in, T = tr[v(i, "T_feed")], tr[v(i, "T_S1")]
            f = (m_u * cp * (T_in - T) - b.s1.ua * (T - tr["amb"])) / M1
            return f, {
                v(i, "T_feed"): np.full_like(T, m_u * cp / M1),
                v(i, "T_S1"): np.full_like(T, -(m_u * cp + b.s1.ua) / M1),
            }

        def f_S2(tr, i=i, b=b, m_u=m_u, M2=M2):
            T1, T, Tb = tr[v(i, "T_S1")], tr[v(i, "T_S2")], tr[v(i, "T_b")]
            f = (m_u * cp * (T1 - T) - b.s2.ua * (T - Tb)) / M2
            return f, {
                v(i, "T_S1"): np.full_like(T, m_u * cp / M2),
                v(i, "T_S2"): np.full_like(T, -(m_u * cp + b.s2.ua) / M2),
                v(i, "T_b"): np.full_like(T, b.s2.ua / M2),
            }

        def f_S3(tr, i=i, b=b, m_u=m_u, M3=M3):
            T2, T = tr[v(i, "T_S2")], tr[v(i, "T_S3")]
            f = (m_u * cp * (T2 - T) - b.s3.ua * (T - tr["amb"])) / M3
            return f, {
                v(i, "T_S2"): np.full_like(T, m_u * cp / M3),
                v(i, "T_S3"): np.full_like(T, -(m_u * cp + b.s3.ua) / M3),
            }

        def f_b(tr, i=i, b=b):
            T2, Tb = tr[v(i, "T_S2")], tr[v(i, "T_b")]
            f = (b.s2.ua * (T2 - Tb) - b.envelope_ua * (Tb - tr["amb"])) / b.heat_capacity
            return f, {
                v(i, "T_S2"): np.full_like(Tb, b.s2.ua / b.heat_capacity),
                v(i, "T_b"): np.full_like(Tb, -(b.s2.ua + b.envelope_ua) / b.heat_capacity),
            }

        if i == n - 1:
            m_i = float(flows.m_bypass)
            ret_temp_name = v(i, "T_bypass")
        else:
            m_i = float(flows.m_return[i + 1])
            ret_temp_name = v(i + 1, "T_return")

        def f_return(tr, i=i, b=b, m_u=m_u, m_i=m_i, ret_temp_name=ret_temp_name, MR=MR):
            T3, T_i, T = tr[v(i, "T_S3")], tr[ret_temp_name], tr[v(i, "T_return")]
            f = (m_u * cp * T3 + m_i * cp * T_i - (m_u + m_i) * cp * T
                 - b.return_trunk.ua * (T - tr["amb"])) / MR
            return f, {
                v(i, "T_S3"): np.full_like(T, m_u * cp / MR),
                ret_temp_name: np.full_like(T, m_i * cp / MR),
                v(i, "T_return"): np.full_like(T, -((m_u + m_i) * cp + b.return_trunk.ua) / MR),
            }

        bld.dynamics(v(i, "T_feed"), f_feed)
        bld.dynamics(v(i, "T_S1"), f_S1)
        bld.dynamics(v(i, "T_S2"), f_S2)
        bld.dynamics(v(i, "T_S3"), f_S3)
        bld.dynamics(v(i, "T_b"), f_b)
        bld.dynamics(v(i, "T_return"), f_return)

        if i == n - 1:
            m_byp = float(flows.m_bypass)
            MB = b.bypass.thermal_mass(fluid)

            def f_byp(tr, i=i, b=b, m_byp=m_byp, MB=MB):
                TF, T = tr[v(i, "T_feed")], tr[v(i, "T_bypass")]
                f = (m_byp * cp * (TF - T) - b.bypass.ua * (T - tr["amb"])) / MB
                return f, {
                    v(i, "T_feed"): np.full_like(T, m_byp * cp / MB),
                    v(i, "T_bypass"): np.full_like(T, -(m_byp * cp + b.bypass.ua) / MB),
                }

            bld.dynamics(v(i, "T_bypass"), f_byp)

        bld.quad_cost(v(i, "T_b"), spec.Q_discomfort, refs.T_set)
        bld.quad_cost(v(i, "T_feed"), spec.Q_loss["F"], refs.T_amb)
        bld.quad_cost(v(i, "T_S1"), spec.Q_loss["S1"], refs.T_amb)
        bld.quad_cost(v(i, "T_S3"), spec.Q_loss["S3"], refs.T_amb)
        bld.quad_cost(v(i, "T_return"), spec.Q_loss["R"], refs.T_amb)
        if i == n - 1:
            bld.quad_cost(v(i, "T_bypass"), spec.Q_loss["B"], refs.T_amb)

    nlp, layout = bld.build()
    return OcpProblem(nlp, layout, "network", "centralized")
