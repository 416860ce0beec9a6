"""Step-local curvature snapshots and lane primitives.

A snapshot binds the loss, gradient, and curvature closures of one
mini-batch at one parameter point. Exactly one snapshot is constructed per
optimizer step; a module-level counter backs the tests that enforce this.

Matvecs exclude damping: solvers add lam*v themselves, so a single snapshot
can serve multiple damping values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError
from .models import Batch, Linearization, Model, linearize, loss_value
from .numeric import ParamVector

CURVATURE_KINDS = ("hessian", "ggn_mse", "ggn_ce")

_snapshot_builds = 0


def snapshot_build_count() -> int:
    """Total snapshots constructed since import (test instrumentation)."""
    return _snapshot_builds


class RowOps:
    """Row-space primitives of a GGN operator.

    Rows are the per-(example, output) scaled Jacobian rows J_hat; the Gram
    matrix J_hat J_hat^T is accumulated layer by layer from activations and
    output sensitivities, so the (m, d) row matrix never exists.
    """

    def __init__(self, lin: Linearization, m: int, seeds: np.ndarray, rhs: np.ndarray):
        self._lin = lin
        self.m = m
        self._seeds = seeds
        self.rhs = rhs
        self._gram: np.ndarray | None = None

    def scaled_row_apply(self, v: ParamVector) -> np.ndarray:
        """J_hat v, length m."""
        t = self._lin.jvp(v)
        scaled = np.einsum("bij,bj->bi", self._seeds, t)
        return scaled.ravel()

    def scaled_row_transpose(self, u: np.ndarray) -> ParamVector:
        """J_hat^T u."""
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.m,):
            raise ContractError(f"row vector has length {u.shape}, expected ({self.m},)")
        U = u.reshape(self._lin.out.shape[0], -1)
        cot = np.einsum("bij,bj->bi", self._seeds, U)
        return self._lin.vjp(cot)

    def gram(self) -> np.ndarray:
        if self._gram is None:
            self._gram = self._lin.output_gram(self._seeds)
        return self._gram


@dataclass
class Snapshot:
    """Linearization state for one step: loss, gradient, curvature closures."""

    kind: str | None
    loss_before: float
    grad: ParamVector
    batch_size: int
    matvec: Callable[[ParamVector], ParamVector] | None
    row: RowOps | None
    lin: Linearization | None = field(default=None, repr=False)
    _model: Model | None = field(default=None, repr=False)
    _batch: Batch | None = field(default=None, repr=False)

    def loss_at(self, w: ParamVector) -> float:
        """Batch loss at another parameter point (same batch); forward only."""
        return loss_value(self._model, w, self._batch)


def make_snapshot(kind: str | None, model: Model, w: ParamVector, batch: Batch) -> Snapshot:
    """Build the step's single curvature snapshot.

    kind None produces a degenerate snapshot (loss and gradient only) for
    methods that use the raw gradient as the direction.
    """
    global _snapshot_builds
    if kind is not None and kind not in CURVATURE_KINDS:
        raise ContractError(f"unknown curvature kind {kind!r}")
    if kind == "ggn_mse" and batch.loss_kind != "mse":
        raise ContractError("ggn_mse curvature requires an mse batch")
    if kind == "ggn_ce" and batch.loss_kind != "ce":
        raise ContractError("ggn_ce curvature requires a ce batch")
    lin = linearize(model, w, batch)
    _snapshot_builds += 1
    b = batch.size
    matvec = None
    row = None
    if kind == "hessian":
        matvec = lin.hvp
    elif kind in ("ggn_mse", "ggn_ce"):

        def matvec(v: ParamVector) -> ParamVector:
            return lin.vjp(lin.hz_apply(lin.jvp(v))) * (1.0 / b)

        c = model.output_dim
        m = b * c
        if kind == "ggn_mse":
            seeds = np.broadcast_to(np.eye(c), (b, c, c)).copy()
            rhs = lin.out_grad.ravel().copy()
        else:
            seeds = lin.hz_half()
            rhs = np.einsum("bij,bj->bi", lin.hz_half_pinv(), lin.out_grad).ravel()
        row = RowOps(lin, m, seeds, rhs)
    return Snapshot(
        kind=kind,
        loss_before=lin.loss,
        grad=lin.grad,
        batch_size=b,
        matvec=matvec,
        row=row,
        lin=lin,
        _model=model,
        _batch=batch,
    )


def hessian_matvec(snapshot: Snapshot, v: ParamVector) -> ParamVector:
    if snapshot.kind != "hessian":
        raise ContractError("hessian_matvec requires a hessian snapshot")
    return snapshot.matvec(v)


def ggn_matvec(snapshot: Snapshot, v: ParamVector) -> ParamVector:
    if snapshot.kind not in ("ggn_mse", "ggn_ce"):
        raise ContractError("ggn_matvec requires a GGN snapshot")
    return snapshot.matvec(v)


def row_gram(snapshot: Snapshot) -> np.ndarray:
    if snapshot.row is None:
        raise ContractError("row primitives are only available for GGN snapshots")
    return snapshot.row.gram()


def backproject(snapshot: Snapshot, v_row: np.ndarray) -> ParamVector:
    if snapshot.row is None:
        raise ContractError("row primitives are only available for GGN snapshots")
    return snapshot.row.scaled_row_transpose(v_row)
