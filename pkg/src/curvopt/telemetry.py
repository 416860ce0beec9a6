"""Randomized curvature estimators, cadence gates, and the step record.

StepInfo carries a fixed key set on every step of every method: fields whose
probe did not run hold a sentinel (NaN for reals, -1 for integers), never a
missing key. Estimator probes operate on the snapshot's matvec closures; no
second linearization is ever built for them.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ContractError
from .models import Batch, Linearization, Model, linearize
from .numeric import ParamVector, Rng, rademacher

NAN = float("nan")

STEP_INFO_FIELDS = (
    "loss_before",
    "loss_after",
    "rho",
    "lam",
    "grad_norm",
    "step_norm",
    "solver_iterations",
    "solver_converged",
    "final_relative_residual",
    "diag_mean",
    "trace_estimate",
    "top_eig_estimate",
    "step_index",
)

_INT_FIELDS = {"solver_iterations", "solver_converged", "step_index"}


@dataclass(frozen=True)
class StepInfo:
    loss_before: float = NAN
    loss_after: float = NAN
    rho: float = NAN
    lam: float = NAN
    grad_norm: float = NAN
    step_norm: float = NAN
    solver_iterations: int = -1
    solver_converged: int = -1
    final_relative_residual: float = NAN
    diag_mean: float = NAN
    trace_estimate: float = NAN
    top_eig_estimate: float = NAN
    step_index: int = -1

    def to_row(self) -> list:
        return [getattr(self, name) for name in STEP_INFO_FIELDS]


assert tuple(f.name for f in fields(StepInfo)) == STEP_INFO_FIELDS


@dataclass(frozen=True)
class Cadence:
    """Periodic gate: fires at steps t with t % k == 0; k = -1 disables."""

    k: int

    def __post_init__(self):
        if self.k != -1 and self.k < 1:
            raise ContractError("cadence k must be -1 (disabled) or >= 1")

    @property
    def enabled(self) -> bool:
        return self.k >= 1

    def fires(self, t: int) -> bool:
        return self.k >= 1 and t % self.k == 0


def pack_step_info(plan, raw: dict) -> StepInfo:
    """Fill the fixed schema; keys absent from raw keep their sentinel."""
    values = {}
    for key, val in raw.items():
        if key not in plan.schema:
            raise ContractError(f"step metric {key!r} is not in the planned schema")
        values[key] = int(val) if key in _INT_FIELDS else float(val)
    return StepInfo(**values)


def hutchinson_diag(matvec, rng: Rng, d: int, n_probes: int) -> np.ndarray:
    """Unbiased diagonal estimate: mean of z * (H z) over Rademacher probes."""
    if n_probes < 1:
        raise ContractError("hutchinson_diag requires n_probes >= 1")
    acc = np.zeros(d)
    for _ in range(n_probes):
        z = rademacher(rng, d)
        acc += z * matvec(z)
    return acc / n_probes


def hutchinson_trace(matvec, rng: Rng, d: int, n_probes: int) -> float:
    """Unbiased trace estimate: mean of z . (H z) over Rademacher probes."""
    if n_probes < 1:
        raise ContractError("hutchinson_trace requires n_probes >= 1")
    acc = 0.0
    for _ in range(n_probes):
        z = rademacher(rng, d)
        acc += float(np.dot(z, matvec(z)))
    return acc / n_probes


def power_iter_top_eig(matvec, rng: Rng, d: int, iters: int) -> float:
    """Rayleigh quotient after `iters` normalized power iterations."""
    if iters < 1:
        raise ContractError("power_iter_top_eig requires iters >= 1")
    v = rademacher(rng, d) / np.sqrt(d)
    rayleigh = 0.0
    for _ in range(iters):
        hv = matvec(v)
        rayleigh = float(np.dot(v, hv))
        norm = float(np.linalg.norm(hv))
        if norm == 0.0:
            return 0.0
        v = hv / norm
    return rayleigh


def gnb_diag(
    model: Model,
    w: ParamVector,
    batch: Batch,
    rng: Rng,
    n_samples: int,
    lin: Linearization | None = None,
) -> ParamVector:
    """Sampled-label squared-gradient estimate of the ce GGN diagonal.

    Each round draws labels from the softmax predictions, takes the gradient
    of the mean ce loss against them, and accumulates b * g*g. Passing the
    step's linearization reuses its forward activations.
    """
    if batch.loss_kind != "ce":
        raise ContractError("gnb_diag requires a cross-entropy batch")
    if n_samples < 1:
        raise ContractError("gnb_diag requires n_samples >= 1")
    if lin is None:
        lin = linearize(model, w, batch)
    p = lin.probs
    b, c = p.shape
    cum = np.cumsum(p, axis=1)
    acc = np.zeros(w.dim)
    for _ in range(n_samples):
        u = rng.uniform(b)
        labels = np.minimum((u[:, None] > cum).sum(axis=1), c - 1)
        cot = p.copy()
        cot[np.arange(b), labels] -= 1.0
        ghat = lin.vjp(cot / b)
        acc += b * (ghat.data * ghat.data)
    return w.like(acc / n_samples)
