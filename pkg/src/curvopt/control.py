"""Damping policies and diagonal preconditioner state.

Trust-region damping follows Levenberg-Marquardt logic: good gain ratios
shrink lam, bad ones grow it, always inside [lam_min, lam_max]. The gain
ratio compares the realized decrease against the undamped quadratic model
of the snapshot, evaluated at the *applied* update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .curvature import Snapshot
from .errors import ContractError
from .numeric import ParamVector, dot

DEFAULT_RHO_CLIP = 5.0
PRED_DECREASE_EPS = 1e-15


@dataclass(frozen=True)
class TrustRegionConfig:
    lower: float = 0.25
    upper: float = 0.75
    factor_good: float = 0.5
    factor_bad: float = 1.5
    lam_min: float = 1e-12
    lam_max: float = 1e6
    rho_clip: float = DEFAULT_RHO_CLIP
    every_k: int = 5


@dataclass(frozen=True)
class DampingState:
    lam: float
    policy: str  # "constant" | "trust_region"
    tr: TrustRegionConfig | None = None

    def __post_init__(self):
        if self.policy not in ("constant", "trust_region"):
            raise ContractError(f"unknown damping policy {self.policy!r}")
        if self.policy == "trust_region" and self.tr is None:
            object.__setattr__(self, "tr", TrustRegionConfig())


@dataclass(frozen=True)
class RhoBundle:
    loss_before: float
    loss_after: float
    predicted_decrease: float
    rho: float  # NaN when predicted decrease is degenerate


@dataclass(frozen=True)
class PrecondState:
    kind: str  # "none" | "sq_grad" | "diag_ema"
    diag: ParamVector
    ema_beta: float = 0.0
    step_count: int = 0


def precond_sq_grad(grad: ParamVector) -> ParamVector:
    """Elementwise squared gradient diagonal."""
    return grad.like(grad.data * grad.data)


def precond_diag_ema_update(state: PrecondState, new_diag: ParamVector) -> PrecondState:
    """EMA smoothing of a diagonal estimate; no bias correction."""
    if state.kind != "diag_ema":
        raise ContractError("precond_diag_ema_update requires a diag_ema state")
    beta = state.ema_beta
    mixed = beta * state.diag.data + (1.0 - beta) * new_diag.data
    diag = state.diag.like(np.maximum(mixed, 0.0))
    return replace(state, diag=diag, step_count=state.step_count + 1)


def compute_rho(
    snapshot: Snapshot,
    applied_update: ParamVector,
    loss_after: float,
    rho_clip: float = DEFAULT_RHO_CLIP,
) -> RhoBundle:
    """Gain ratio of the applied update against the snapshot's quadratic model.

    predicted decrease = -(g.u + 0.5 u.H u) with the undamped curvature; a
    non-positive prediction yields the NaN sentinel and damping leaves lam
    unchanged.
    """
    if snapshot.matvec is None:
        raise ContractError("compute_rho requires a snapshot with a curvature matvec")
    u = applied_update
    gu = dot(snapshot.grad, u)
    uhu = dot(snapshot.matvec(u), u)
    pred = -(gu + 0.5 * uhu)
    if not math.isfinite(pred) or pred <= PRED_DECREASE_EPS:
        return RhoBundle(snapshot.loss_before, loss_after, pred, float("nan"))
    rho = (snapshot.loss_before - loss_after) / pred
    rho = float(np.clip(rho, -rho_clip, rho_clip))
    return RhoBundle(snapshot.loss_before, loss_after, pred, rho)


def damping_update(state: DampingState, rho: RhoBundle | None, t: int) -> DampingState:
    """Advance the damping state; sentinel / absent rho is a no-op."""
    if state.policy == "constant":
        return state
    if rho is None or math.isnan(rho.rho):
        return state
    tr = state.tr
    lam = state.lam
    if rho.rho >= tr.upper:
        lam = lam * tr.factor_good
    elif rho.rho <= tr.lower:
        lam = lam * tr.factor_bad
    lam = min(max(lam, tr.lam_min), tr.lam_max)
    return replace(state, lam=lam)


def escalate_damping(state: DampingState) -> DampingState:
    """Raise lam after a failed step (trust_region only)."""
    if state.policy != "trust_region":
        return state
    tr = state.tr
    lam = min(max(state.lam * tr.factor_bad, tr.lam_min), tr.lam_max)
    return replace(state, lam=lam)
