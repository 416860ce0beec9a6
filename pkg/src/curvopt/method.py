"""Assembler, planner, and step executor.

A declarative MethodSpec is validated into a Method carrying a static Plan:
the execution lane and solve algorithm, the fixed StepInfo schema, and all
cadence gates. The step then runs a six-phase lifecycle on one curvature
snapshot -- solve, apply the transform chain, gated post-update probes,
damping update, info packing -- with the lane path bound once at assembly
(no per-step lane branching).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, replace
from typing import Any

import numpy as np

from .control import (
    DEFAULT_RHO_CLIP,
    DampingState,
    PrecondState,
    TrustRegionConfig,
    compute_rho,
    damping_update,
    escalate_damping,
    precond_diag_ema_update,
    precond_sq_grad,
)
from .curvature import CURVATURE_KINDS, Snapshot, make_snapshot
from .errors import AssemblyError, ContractError
from .models import Model, param_layout
from .numeric import ParamVector, Rng, global_norm, zeros
from .solvers import CgConfig, cg_solve, damping_to_row, row_solve_cg, row_solve_cholesky, solve_diag
from .telemetry import (
    STEP_INFO_FIELDS,
    Cadence,
    StepInfo,
    gnb_diag,
    hutchinson_diag,
    hutchinson_trace,
    pack_step_info,
    power_iter_top_eig,
)
from .transforms import (
    TransformChain,
    add_decayed_weights,
    chain_apply,
    chain_init,
    parse_chain,
    scale,
    scale_by_adam,
    scale_by_schedule,
    sophia_clip,
    trace_momentum,
)

# When set to a list, each executed solve appends its lane tag (test hook for
# the lane-fixedness invariant).
lane_trace: list[str] | None = None


@dataclass(frozen=True)
class CurvatureSpec:
    kind: str

    def __post_init__(self):
        if self.kind not in CURVATURE_KINDS:
            raise AssemblyError(f"unknown curvature kind {self.kind!r}")


@dataclass(frozen=True)
class SolverSpec:
    kind: str  # "diag" | "cg" | "row_cholesky" | "row_cg"
    cg: CgConfig = CgConfig()

    def __post_init__(self):
        if self.kind not in ("diag", "cg", "row_cholesky", "row_cg"):
            raise AssemblyError(f"unknown solver kind {self.kind!r}")


@dataclass(frozen=True)
class PrecondSpec:
    kind: str  # "sq_grad" | "diag_ema"
    beta: float = 0.99

    def __post_init__(self):
        if self.kind not in ("sq_grad", "diag_ema"):
            raise AssemblyError(f"unknown preconditioner kind {self.kind!r}")


@dataclass(frozen=True)
class DampingSpec:
    policy: str = "constant"
    lam0: float = 1.0
    tr: TrustRegionConfig | None = None

    def __post_init__(self):
        if self.policy not in ("constant", "trust_region"):
            raise AssemblyError(f"unknown damping policy {self.policy!r}")
        if self.policy == "trust_region" and self.tr is None:
            object.__setattr__(self, "tr", TrustRegionConfig())


@dataclass(frozen=True)
class EstimatorSpec:
    kind: str  # "hutchinson" | "gnb"
    n_probes: int = 1  # sample rounds for gnb
    every_k: int = 1

    def __post_init__(self):
        if self.kind not in ("hutchinson", "gnb"):
            raise AssemblyError(f"unknown estimator kind {self.kind!r}")


@dataclass(frozen=True)
class TelemetrySpec:
    rho_every_k: int = -1
    trace_every_k: int = -1
    top_eig_every_k: int = -1
    trace_probes: int = 1
    top_eig_iters: int = 20


@dataclass(frozen=True)
class MethodSpec:
    curvature: CurvatureSpec | None = None
    solver: SolverSpec | None = None
    precond: PrecondSpec | None = None
    damping: DampingSpec = DampingSpec()
    estimator: EstimatorSpec | None = None
    telemetry: TelemetrySpec = TelemetrySpec()
    chain: TransformChain = ()


@dataclass(frozen=True)
class Gates:
    rho: Cadence
    trace: Cadence
    top_eig: Cadence
    estimator: Cadence
    tr_rho: Cadence

    def rho_fires(self, t: int) -> bool:
        return self.rho.fires(t) or self.tr_rho.fires(t)


@dataclass(frozen=True)
class Plan:
    lane: str  # "diag" | "param" | "row"
    algo: str  # "identity" | "diag_scale" | "cg" | "cholesky"
    schema: tuple[str, ...]
    gates: Gates
    solver_config: CgConfig
    needs_row_primitives: bool
    needs_rho: bool


@dataclass
class MethodState:
    damping: DampingState
    precond: PrecondState
    chain: tuple
    warm_start: np.ndarray | None
    step_index: int
    rng: Rng


def _resolve_lane(spec: MethodSpec) -> tuple[str, str]:
    if spec.solver is None:
        return "diag", "identity"
    kind = spec.solver.kind
    if kind == "diag":
        return "diag", "diag_scale"
    if kind == "cg":
        return "param", "cg"
    return "row", "cholesky" if kind == "row_cholesky" else "cg"


def _validate(spec: MethodSpec) -> None:
    curv = spec.curvature
    solver = spec.solver
    if solver is not None and curv is None:
        raise AssemblyError(f"solver '{solver.kind}' requires a curvature operator")
    if solver is not None and solver.kind in ("row_cholesky", "row_cg"):
        if curv.kind == "hessian":
            raise AssemblyError(
                "row-space solver requires row primitives; "
                "curvature 'hessian' does not provide them"
            )
    if solver is not None and solver.kind == "diag":
        if spec.precond is None and spec.estimator is None:
            raise AssemblyError(
                "diagonal solve requires a diagonal source: "
                "configure a preconditioner or estimator"
            )
    if spec.estimator is not None:
        if curv is None:
            raise AssemblyError("estimator requires a curvature operator")
        if spec.estimator.kind == "gnb" and curv.kind == "ggn_mse":
            raise AssemblyError(
                "gnb estimator requires cross-entropy loss; curvature 'ggn_mse' implies mse"
            )
        if spec.precond is not None and spec.precond.kind == "sq_grad":
            raise AssemblyError(
                "sq_grad preconditioner cannot be combined with an estimator"
            )
    if spec.precond is not None and spec.precond.kind == "diag_ema" and spec.estimator is None:
        raise AssemblyError("diag_ema preconditioner requires an estimator to feed it")
    if spec.damping.policy == "trust_region" and spec.damping.tr.every_k == -1:
        raise AssemblyError("trust-region damping requires an enabled gain-ratio cadence")
    if curv is None:
        tel = spec.telemetry
        if tel.rho_every_k != -1 or tel.trace_every_k != -1 or tel.top_eig_every_k != -1:
            raise AssemblyError("telemetry probes require a curvature operator")
        if spec.damping.policy == "trust_region":
            raise AssemblyError("trust-region damping requires a curvature operator")


class Method:
    """An assembled method: spec + static plan + the model it optimizes."""

    def __init__(self, spec: MethodSpec, plan: Plan, model: Model):
        self.spec = spec
        self.plan = plan
        self.model = model
        self._solve = {
            "identity": self._solve_identity,
            "diag_scale": self._solve_diag,
            "cg": self._solve_param_cg if plan.lane == "param" else self._solve_row_cg,
            "cholesky": self._solve_row_cholesky,
        }[plan.algo]
        tr = spec.damping.tr
        self._rho_clip = tr.rho_clip if tr is not None else DEFAULT_RHO_CLIP

    # -- lane solve strategies (bound once at assembly) --------------------

    def _solve_identity(self, snap: Snapshot, lam: float, precond: PrecondState, state: MethodState):
        if lane_trace is not None:
            lane_trace.append("diag")
        return snap.grad, -1, -1, float("nan"), None

    def _solve_diag(self, snap: Snapshot, lam: float, precond: PrecondState, state: MethodState):
        if lane_trace is not None:
            lane_trace.append("diag")
        return solve_diag(precond.diag, snap.grad, lam), -1, -1, float("nan"), None

    def _solve_param_cg(self, snap: Snapshot, lam: float, precond: PrecondState, state: MethodState):
        if lane_trace is not None:
            lane_trace.append("param")
        cfg = self.plan.solver_config
        x0 = None
        if cfg.warm_start and state.warm_start is not None:
            if state.warm_start.size == snap.grad.dim:
                x0 = snap.grad.like(state.warm_start)
        pre = precond.diag if self.spec.precond is not None else None
        res = cg_solve(snap.matvec, snap.grad, lam, cfg, precond=pre, x0=x0)
        warm = res.direction.data if cfg.warm_start else None
        return res.direction, res.iterations, int(res.converged), res.final_relative_residual, warm

    def _solve_row_cholesky(self, snap: Snapshot, lam: float, precond: PrecondState, state: MethodState):
        if lane_trace is not None:
            lane_trace.append("row")
        row = snap.row
        mu = damping_to_row(lam, snap.batch_size)
        v = row_solve_cholesky(row.gram(), row.rhs, mu)
        return row.scaled_row_transpose(v), -1, 1, float("nan"), None

    def _solve_row_cg(self, snap: Snapshot, lam: float, precond: PrecondState, state: MethodState):
        if lane_trace is not None:
            lane_trace.append("row")
        cfg = self.plan.solver_config
        row = snap.row
        gram = row.gram()
        mu = damping_to_row(lam, snap.batch_size)
        x0 = None
        if cfg.warm_start and state.warm_start is not None and state.warm_start.size == row.m:
            x0 = state.warm_start
        v, iters, conv, relres = row_solve_cg(lambda u: gram @ u, row.rhs, mu, cfg, x0=x0)
        warm = v if cfg.warm_start else None
        return row.scaled_row_transpose(v), iters, int(conv), relres, warm

    # -- lifecycle ----------------------------------------------------------

    def init(self, w: ParamVector, seed: int = 0) -> MethodState:
        """Fresh state: lam = lam0, zero preconditioner/chain state, step 0."""
        spec = self.spec
        damping = DampingState(lam=spec.damping.lam0, policy=spec.damping.policy, tr=spec.damping.tr)
        pkind = spec.precond.kind if spec.precond is not None else "none"
        beta = spec.precond.beta if spec.precond is not None else 0.0
        precond = PrecondState(kind=pkind, diag=zeros(w.layout), ema_beta=beta, step_count=0)
        return MethodState(
            damping=damping,
            precond=precond,
            chain=chain_init(spec.chain, w),
            warm_start=None,
            step_index=0,
            rng=Rng(seed),
        )

    def step(self, w: ParamVector, batch, state: MethodState) -> tuple[ParamVector, MethodState, StepInfo]:
        """One optimization step; returns (w', state', info).

        A non-finite direction or update aborts the step: w' = w, the
        solver_converged field reports -1, step_norm reports 0, and
        trust-region damping escalates lam.
        """
        spec = self.spec
        plan = self.plan
        t = state.step_index
        rng = state.rng.clone()
        kind = spec.curvature.kind if spec.curvature is not None else None
        snap = make_snapshot(kind, self.model, w, batch)
        lam = state.damping.lam
        g = snap.grad

        raw = {
            "loss_before": snap.loss_before,
            "lam": lam,
            "grad_norm": global_norm(g),
            "step_index": t,
        }

        def abort(iters=-1):
            raw.update(solver_iterations=iters, solver_converged=-1, step_norm=0.0)
            new_state = MethodState(
                damping=escalate_damping(state.damping),
                precond=state.precond,
                chain=state.chain,
                warm_start=None,
                step_index=t + 1,
                rng=rng,
            )
            return w, new_state, pack_step_info(plan, raw)

        if not (math.isfinite(snap.loss_before) and np.all(np.isfinite(g.data))):
            return abort()

        precond = state.precond
        if precond.kind == "sq_grad":
            precond = replace(precond, diag=precond_sq_grad(g), step_count=precond.step_count + 1)

        direction, iters, conv, relres, warm = self._solve(snap, lam, precond, state)
        update, chain_state = chain_apply(spec.chain, state.chain, direction, w, t, precond_diag=precond.diag)

        raw.update(solver_iterations=iters, solver_converged=conv)
        if not math.isnan(relres):
            raw["final_relative_residual"] = relres

        if not (np.all(np.isfinite(direction.data)) and np.all(np.isfinite(update.data))):
            return abort(iters=iters)

        w_next = w + update
        if not np.all(np.isfinite(w_next.data)):
            return abort(iters=iters)
        raw["step_norm"] = global_norm(update)

        rho_bundle = None
        tr_fired = plan.gates.tr_rho.fires(t)
        if plan.gates.rho_fires(t):
            loss_after = snap.loss_at(w_next)
            rho_bundle = compute_rho(snap, update, loss_after, rho_clip=self._rho_clip)
            raw["loss_after"] = loss_after
            raw["rho"] = rho_bundle.rho

        if spec.estimator is not None and plan.gates.estimator.fires(t):
            precond, diag_mean = self._run_estimator(snap, w, batch, rng, precond)
            raw["diag_mean"] = diag_mean
        if plan.gates.trace.fires(t):
            raw["trace_estimate"] = hutchinson_trace(
                self._array_matvec(snap), rng, w.dim, spec.telemetry.trace_probes
            )
        if plan.gates.top_eig.fires(t):
            raw["top_eig_estimate"] = power_iter_top_eig(
                self._array_matvec(snap), rng, w.dim, spec.telemetry.top_eig_iters
            )

        damping = damping_update(state.damping, rho_bundle if tr_fired else None, t)
        info = pack_step_info(plan, raw)
        new_state = MethodState(
            damping=damping,
            precond=precond,
            chain=chain_state,
            warm_start=warm,
            step_index=t + 1,
            rng=rng,
        )
        return w_next, new_state, info

    @staticmethod
    def _array_matvec(snap: Snapshot):
        return lambda x: snap.matvec(snap.grad.like(x)).data

    def _run_estimator(self, snap, w, batch, rng, precond):
        est = self.spec.estimator
        if est.kind == "hutchinson":
            raw = hutchinson_diag(self._array_matvec(snap), rng, w.dim, est.n_probes)
            new_diag = w.like(raw)
        else:
            if batch.loss_kind != "ce":
                raise ContractError("gnb estimator requires a cross-entropy batch")
            new_diag = gnb_diag(self.model, w, batch, rng, est.n_probes, lin=snap.lin)
        if precond.kind == "diag_ema":
            precond = precond_diag_ema_update(precond, new_diag)
        else:
            floored = new_diag.like(np.maximum(new_diag.data, 0.0))
            precond = replace(precond, diag=floored, step_count=precond.step_count + 1)
        return precond, float(precond.diag.data.mean())


def assemble(spec: MethodSpec, model: Model) -> Method:
    """Validate a spec and freeze its execution plan."""
    _validate(spec)
    lane, algo = _resolve_lane(spec)
    tel = spec.telemetry
    gates = Gates(
        rho=Cadence(tel.rho_every_k),
        trace=Cadence(tel.trace_every_k),
        top_eig=Cadence(tel.top_eig_every_k),
        estimator=Cadence(spec.estimator.every_k if spec.estimator is not None else -1),
        tr_rho=Cadence(
            spec.damping.tr.every_k if spec.damping.policy == "trust_region" else -1
        ),
    )
    plan = Plan(
        lane=lane,
        algo=algo,
        schema=STEP_INFO_FIELDS,
        gates=gates,
        solver_config=spec.solver.cg if spec.solver is not None else CgConfig(),
        needs_row_primitives=(lane == "row"),
        needs_rho=(spec.damping.policy == "trust_region" or tel.rho_every_k != -1),
    )
    return Method(spec, plan, model)


# -- presets ----------------------------------------------------------------

_SECOND_ORDER_CG = CgConfig(tol=1e-5, maxiter=5, stabilise_every=10, warm_start=True)


def _descent_chain(lr: float) -> TransformChain:
    return (scale(lr), scale(-1.0))


def _sophia_chain(gamma: float, lr: float) -> TransformChain:
    # Weight decay sits after the clip and before the final scale.
    return (
        trace_momentum(0.96),
        sophia_clip(gamma, 1e-12),
        add_decayed_weights(1e-4),
        scale_by_schedule("constant", alpha0=lr),
        scale(-1.0),
    )


def _preset_specs() -> dict[str, MethodSpec]:
    return {
        "newton_cg": MethodSpec(
            curvature=CurvatureSpec("hessian"),
            solver=SolverSpec("cg", CgConfig(tol=1e-5, maxiter=10, stabilise_every=10, warm_start=True)),
            damping=DampingSpec("trust_region", lam0=1.0),
            chain=_descent_chain(1e-3),
        ),
        "sgn_mse": MethodSpec(
            curvature=CurvatureSpec("ggn_mse"),
            solver=SolverSpec("cg", _SECOND_ORDER_CG),
            damping=DampingSpec("constant", lam0=1.0),
            chain=_descent_chain(1e-3),
        ),
        "sgn_ce": MethodSpec(
            curvature=CurvatureSpec("ggn_ce"),
            solver=SolverSpec("cg", _SECOND_ORDER_CG),
            damping=DampingSpec("constant", lam0=1.0),
            chain=_descent_chain(1e-3),
        ),
        "egn_mse_cholesky": MethodSpec(
            curvature=CurvatureSpec("ggn_mse"),
            solver=SolverSpec("row_cholesky", _SECOND_ORDER_CG),
            damping=DampingSpec("constant", lam0=1.0),
            chain=_descent_chain(1e-3),
        ),
        "egn_mse_cg": MethodSpec(
            curvature=CurvatureSpec("ggn_mse"),
            solver=SolverSpec("row_cg", _SECOND_ORDER_CG),
            damping=DampingSpec("constant", lam0=1.0),
            chain=_descent_chain(1e-3),
        ),
        "egn_ce": MethodSpec(
            curvature=CurvatureSpec("ggn_ce"),
            solver=SolverSpec("row_cholesky", _SECOND_ORDER_CG),
            damping=DampingSpec("constant", lam0=1.0),
            chain=_descent_chain(1e-3),
        ),
        "adahessian": MethodSpec(
            curvature=CurvatureSpec("hessian"),
            solver=SolverSpec("diag"),
            precond=PrecondSpec("diag_ema", beta=0.999),
            # lam0 = 1.0 keeps the first steps bounded while the EMA diagonal
            # warms up from its zero init.
            damping=DampingSpec("constant", lam0=1.0),
            estimator=EstimatorSpec("hutchinson", n_probes=1, every_k=1),
            chain=(
                trace_momentum(0.9),
                scale_by_schedule("constant", alpha0=0.1),
                scale(-1.0),
            ),
        ),
        "sophia_g": MethodSpec(
            curvature=CurvatureSpec("ggn_ce"),
            precond=PrecondSpec("diag_ema", beta=0.99),
            damping=DampingSpec("constant", lam0=0.0),
            estimator=EstimatorSpec("gnb", n_probes=1, every_k=10),
            chain=_sophia_chain(gamma=0.05, lr=0.01),
        ),
        "sophia_h": MethodSpec(
            curvature=CurvatureSpec("hessian"),
            precond=PrecondSpec("diag_ema", beta=0.99),
            damping=DampingSpec("constant", lam0=0.0),
            estimator=EstimatorSpec("hutchinson", n_probes=1, every_k=10),
            chain=_sophia_chain(gamma=0.01, lr=0.01),
        ),
        "sophia_n": MethodSpec(
            curvature=CurvatureSpec("ggn_ce"),
            precond=PrecondSpec("diag_ema", beta=0.99),
            damping=DampingSpec("constant", lam0=0.0),
            estimator=EstimatorSpec("hutchinson", n_probes=1, every_k=10),
            chain=_sophia_chain(gamma=0.05, lr=0.01),
        ),
        "sgd": MethodSpec(
            damping=DampingSpec("constant", lam0=0.0),
            chain=(scale_by_schedule("constant", alpha0=0.1), scale(-1.0)),
        ),
        "sgdm": MethodSpec(
            damping=DampingSpec("constant", lam0=0.0),
            chain=(
                trace_momentum(0.9),
                add_decayed_weights(5e-4),
                scale_by_schedule("constant", alpha0=0.05),
                scale(-1.0),
            ),
        ),
        "adam": MethodSpec(
            damping=DampingSpec("constant", lam0=0.0),
            chain=(
                scale_by_adam(0.9, 0.999, 1e-8),
                scale_by_schedule("constant", alpha0=1e-3),
                scale(-1.0),
            ),
        ),
    }


PRESET_NAMES = tuple(_preset_specs().keys())

_SUBSPEC_TYPES = {
    "curvature": CurvatureSpec,
    "solver": SolverSpec,
    "precond": PrecondSpec,
    "damping": DampingSpec,
    "estimator": EstimatorSpec,
    "telemetry": TelemetrySpec,
}

_NESTED_TYPES = {
    ("solver", "cg"): CgConfig,
    ("damping", "tr"): TrustRegionConfig,
}


def _merge_subspec(name: str, current, patch: dict):
    patch = dict(patch)
    for field_name, nested_type in ((f, t) for (n, f), t in _NESTED_TYPES.items() if n == name):
        if field_name in patch and isinstance(patch[field_name], dict):
            base = getattr(current, field_name, None) if current is not None else None
            if base is None:
                patch[field_name] = nested_type(**patch[field_name])
            else:
                patch[field_name] = dataclasses.replace(base, **patch[field_name])
    if current is None:
        return _SUBSPEC_TYPES[name](**patch)
    return dataclasses.replace(current, **patch)


def apply_overrides(spec: MethodSpec, overrides: dict[str, Any]) -> MethodSpec:
    """Merge nested override dicts (or replacement objects) into a spec."""
    updates = {}
    for key, value in overrides.items():
        if key == "chain":
            updates[key] = parse_chain(value)
        elif key in _SUBSPEC_TYPES and isinstance(value, dict):
            updates[key] = _merge_subspec(key, getattr(spec, key), value)
        elif key in _SUBSPEC_TYPES or key == "chain":
            updates[key] = value
        else:
            raise AssemblyError(f"unknown method spec field {key!r}")
    return dataclasses.replace(spec, **updates)


def preset_spec(name: str, **overrides: Any) -> MethodSpec:
    specs = _preset_specs()
    if name not in specs:
        raise AssemblyError(f"unknown preset {name!r}")
    spec = specs[name]
    if overrides:
        spec = apply_overrides(spec, overrides)
    return spec


def make(name: str, model: Model, **overrides: Any) -> Method:
    """Assemble a named preset, optionally with nested overrides."""
    return assemble(preset_spec(name, **overrides), model)


def module_diff(a: MethodSpec, b: MethodSpec) -> tuple[str, ...]:
    """Names of the spec modules (excluding the transform chain) that differ."""
    diffs = []
    for name in ("curvature", "solver", "precond", "damping", "estimator", "telemetry"):
        if getattr(a, name) != getattr(b, name):
            diffs.append(name)
    return tuple(diffs)


def init(method: Method, w: ParamVector, seed: int = 0) -> MethodState:
    return method.init(w, seed)


def step(method: Method, w: ParamVector, batch, state: MethodState):
    return method.step(w, batch, state)
