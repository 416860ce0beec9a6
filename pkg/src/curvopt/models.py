"""Dense MLP models, losses, and the differentiation primitives.

The model class is fixed: fully-connected layers with bias, relu or tanh
hidden activations, linear output. Per-example losses are mse (0.5*||z-y||^2)
and softmax cross-entropy; the batch loss is the mean.

All curvature operators downstream are built from four primitives computed
against a single linearization point:

  * the batch gradient (reverse mode),
  * Jacobian-vector products of the network outputs (forward tangents),
  * vector-Jacobian products of the network outputs (reverse cotangents),
  * Hessian-vector products (forward-over-reverse, i.e. the tangent of the
    gradient computation).

``Linearization`` caches the forward activations and the primal backward
pass so repeated products at the same point only pay for tangent work.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .numeric import Layout, ParamVector, Rng


@dataclass(frozen=True)
class Model:
    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(self.hidden_widths))
        if self.activation not in ("relu", "tanh"):
            raise ContractError(f"unknown activation {self.activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_widths, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.hidden_widths) + 1


@dataclass(frozen=True)
class Batch:
    """Inputs plus targets: float matrix for mse, class indices for ce."""

    inputs: np.ndarray
    targets: np.ndarray
    loss_kind: str

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        if inputs.ndim != 2 or inputs.shape[0] < 1:
            raise ContractError("batch inputs must be a (b, input_dim) matrix with b >= 1")
        object.__setattr__(self, "inputs", inputs)
        if self.loss_kind == "mse":
            targets = np.asarray(self.targets, dtype=np.float64)
            if targets.ndim == 1:
                targets = targets[:, None]
            if targets.shape[0] != inputs.shape[0]:
                raise ContractError("targets row count does not match inputs")
        elif self.loss_kind == "ce":
            targets = np.asarray(self.targets)
            if not np.issubdtype(targets.dtype, np.integer):
                raise ContractError("ce targets must be integer class indices")
            if targets.ndim != 1 or targets.shape[0] != inputs.shape[0]:
                raise ContractError("ce targets must be a (b,) index vector")
            if targets.min() < 0:
                raise ContractError("ce class indices must be non-negative")
        else:
            raise ContractError(f"unknown loss kind {self.loss_kind!r}")
        object.__setattr__(self, "targets", targets)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def param_layout(model: Model) -> Layout:
    dims = model.dims
    layout = []
    for l in range(model.n_layers):
        layout.append((f"layer{l}.w", (dims[l], dims[l + 1])))
        layout.append((f"layer{l}.b", (dims[l + 1],)))
    return tuple(layout)


def param_count(model: Model) -> int:
    dims = model.dims
    return sum((dims[l] + 1) * dims[l + 1] for l in range(model.n_layers))


def init_params(model: Model, rng: Rng) -> ParamVector:
    """He/Xavier-style gaussian init (gain sqrt(2) for relu hiddens), zero biases."""
    dims = model.dims
    parts = []
    for l in range(model.n_layers):
        fan_in, fan_out = dims[l], dims[l + 1]
        hidden = l < model.n_layers - 1
        gain = np.sqrt(2.0) if (hidden and model.activation == "relu") else 1.0
        w = rng.normal(fan_in * fan_out) * (gain / np.sqrt(fan_in))
        parts.append(w)
        parts.append(np.zeros(fan_out))
    return ParamVector(np.concatenate(parts), param_layout(model))


def _unpack(model: Model, w: ParamVector) -> list[tuple[np.ndarray, np.ndarray]]:
    if w.layout != param_layout(model):
        raise ContractError("parameter layout does not match model")
    dims = model.dims
    out = []
    off = 0
    for l in range(model.n_layers):
        fan_in, fan_out = dims[l], dims[l + 1]
        W = w.data[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        b = w.data[off : off + fan_out]
        off += fan_out
        out.append((W, b))
    return out


def _flatten(parts: list[tuple[np.ndarray, np.ndarray]], layout: Layout) -> ParamVector:
    total = sum(W.size + b.size for W, b in parts)
    flat = np.empty(total)
    off = 0
    for W, b in parts:
        flat[off : off + W.size] = W.reshape(-1)
        off += W.size
        flat[off : off + b.size] = b
        off += b.size
    return ParamVector(flat, layout)


def forward(model: Model, w: ParamVector, X: np.ndarray) -> np.ndarray:
    """Network outputs, shape (b, output_dim)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ContractError("input matrix shape does not match model input_dim")
    weights = _unpack(model, w)
    a = X
    for l, (W, b) in enumerate(weights):
        z = a @ W + b
        if l < model.n_layers - 1:
            a = np.maximum(z, 0.0) if model.activation == "relu" else np.tanh(z)
        else:
            a = z
    return a


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class Linearization:
    """Forward + primal-backward state at one (w, batch) point.

    acts[l] is the input to layer l (acts[0] is the batch); out is the final
    linear output; sp[l] is the activation derivative at hidden layer l;
    G[l] is the gradient of the mean loss w.r.t. layer l's pre-activation.
    """

    model: Model
    batch: Batch
    weights: list[tuple[np.ndarray, np.ndarray]]
    acts: list[np.ndarray]
    out: np.ndarray
    sp: list[np.ndarray]
    loss: float
    out_grad: np.ndarray  # per-example dl/dz, shape (b, c)
    G: list[np.ndarray]
    grad: ParamVector
    probs: np.ndarray | None = None  # softmax(out) for ce
    _hz_half: np.ndarray | None = field(default=None, repr=False)
    _hz_half_pinv: np.ndarray | None = field(default=None, repr=False)

    @property
    def layout(self) -> Layout:
        return self.grad.layout

    def _sp_second(self, l: int) -> np.ndarray | None:
        """Second derivative of the activation at hidden layer l (None if zero)."""
        if self.model.activation == "relu":
            return None
        a = self.acts[l + 1]  # tanh(z)
        return -2.0 * a * self.sp[l]

    def hz_apply(self, T: np.ndarray) -> np.ndarray:
        """Per-example output-space loss Hessian applied to rows of T."""
        if self.batch.loss_kind == "mse":
            return T
        p = self.probs
        return p * T - p * np.sum(p * T, axis=1, keepdims=True)

    def hz_half(self) -> np.ndarray:
        """Per-example symmetric square root of the output Hessian, shape (b, c, c)."""
        if self._hz_half is None:
            self._build_hz_roots()
        return self._hz_half

    def hz_half_pinv(self) -> np.ndarray:
        if self._hz_half_pinv is None:
            self._build_hz_roots()
        return self._hz_half_pinv

    def _build_hz_roots(self) -> None:
        if self.batch.loss_kind == "mse":
            b = self.batch.size
            c = self.model.output_dim
            eye = np.broadcast_to(np.eye(c), (b, c, c)).copy()
            self._hz_half = eye
            self._hz_half_pinv = eye
            return
        p = self.probs
        b, c = p.shape
        if not np.all(np.isfinite(p)):
            # diverged linearization: report NaN rather than crash in eigh
            self._hz_half = np.full((b, c, c), np.nan)
            self._hz_half_pinv = np.full((b, c, c), np.nan)
            return
        hz = np.einsum("bi,ij->bij", p, np.eye(c)) - np.einsum("bi,bj->bij", p, p)
        vals, vecs = np.linalg.eigh(hz)
        floor = 1e-10 * np.maximum(vals.max(axis=1, keepdims=True), 0.0)
        keep = vals > floor
        root = np.where(keep, np.sqrt(np.maximum(vals, 0.0)), 0.0)
        inv_root = np.where(keep, 1.0 / np.where(keep, root, 1.0), 0.0)
        self._hz_half = np.einsum("bik,bk,bjk->bij", vecs, root, vecs)
        self._hz_half_pinv = np.einsum("bik,bk,bjk->bij", vecs, inv_root, vecs)

    # -- tangent / adjoint passes reusing the cached forward --------------

    def jvp(self, v: ParamVector) -> np.ndarray:
        """Per-example output tangents J_i v, shape (b, c)."""
        tang = _unpack(self.model, v)
        da = None
        dz = None
        for l, (W, _) in enumerate(self.weights):
            Vw, Vb = tang[l]
            dz = self.acts[l] @ Vw + Vb
            if da is not None:
                dz = dz + da @ W
            if l < self.model.n_layers - 1:
                da = self.sp[l] * dz
        return dz

    def jvp_all(self, v: ParamVector) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """All pre-activation tangents dz[l] and input tangents da[l] (da[0] = None)."""
        tang = _unpack(self.model, v)
        dz_list: list[np.ndarray] = []
        da_list: list[np.ndarray | None] = [None]
        da = None
        for l, (W, _) in enumerate(self.weights):
            Vw, Vb = tang[l]
            dz = self.acts[l] @ Vw + Vb
            if da is not None:
                dz = dz + da @ W
            dz_list.append(dz)
            if l < self.model.n_layers - 1:
                da = self.sp[l] * dz
                da_list.append(da)
        return dz_list, da_list

    def vjp(self, U: np.ndarray) -> ParamVector:
        """sum_i J_i^T u_i for output cotangent rows u_i; no 1/b factor."""
        U = np.asarray(U, dtype=np.float64)
        if U.shape != self.out.shape:
            raise ContractError("cotangent matrix shape does not match outputs")
        parts: list[tuple[np.ndarray, np.ndarray]] = [None] * self.model.n_layers
        G = U
        for l in range(self.model.n_layers - 1, -1, -1):
            parts[l] = (self.acts[l].T @ G, G.sum(axis=0))
            if l > 0:
                G = (G @ self.weights[l][0].T) * self.sp[l - 1]
        return _flatten(parts, self.layout)

    def hvp(self, v: ParamVector) -> ParamVector:
        """Hessian-vector product of the mean loss: tangent of the gradient pass."""
        tang = _unpack(self.model, v)
        dz_list, da_list = self.jvp_all(v)
        b = self.batch.size
        dG = self.hz_apply(dz_list[-1]) / b
        parts: list[tuple[np.ndarray, np.ndarray]] = [None] * self.model.n_layers
        for l in range(self.model.n_layers - 1, -1, -1):
            gW = self.acts[l].T @ dG
            if da_list[l] is not None:
                gW = gW + da_list[l].T @ self.G[l]
            parts[l] = (gW, dG.sum(axis=0))
            if l > 0:
                W = self.weights[l][0]
                Vw = tang[l][0]
                dG_prev = (dG @ W.T + self.G[l] @ Vw.T) * self.sp[l - 1]
                spp = self._sp_second(l - 1)
                if spp is not None:
                    dG_prev = dG_prev + (self.G[l] @ W.T) * spp * dz_list[l - 1]
                dG = dG_prev
        return _flatten(parts, self.layout)

    def output_gram(self, seeds: np.ndarray) -> np.ndarray:
        """Gram matrix of the seeded output Jacobian rows.

        seeds has shape (b, k, c): example i contributes k rows, row j being
        the Jacobian of seeds[i, j] . f(x_i) w.r.t. the parameters. Returns
        the (b*k, b*k) matrix of pairwise inner products, accumulated layer
        by layer so the (b*k, d) row matrix is never materialized.
        """
        b, k, c = seeds.shape
        if c != self.model.output_dim or b != self.batch.size:
            raise ContractError("seed cotangents shape does not match outputs")
        m = b * k
        gram = np.zeros((m, m))
        D = np.asarray(seeds, dtype=np.float64)
        for l in range(self.model.n_layers - 1, -1, -1):
            A = self.acts[l]
            SA = A @ A.T + 1.0  # +1 covers the bias column
            D2 = D.reshape(m, -1)
            SD = D2 @ D2.T
            if k == 1:
                gram += SD * SA
            else:
                gram += SD * np.repeat(np.repeat(SA, k, axis=0), k, axis=1)
            if l > 0:
                D = (D @ self.weights[l][0].T) * self.sp[l - 1][:, None, :]
        return gram


def linearize(model: Model, w: ParamVector, batch: Batch) -> Linearization:
    """Run forward + primal backward once; everything else reuses this."""
    X = batch.inputs
    if X.shape[1] != model.input_dim:
        raise ContractError("batch input width does not match model input_dim")
    weights = _unpack(model, w)
    acts = [X]
    a = X
    sp = []
    for l, (W, bias) in enumerate(weights):
        z = a @ W + bias
        if l < model.n_layers - 1:
            if model.activation == "relu":
                a = np.maximum(z, 0.0)
                sp.append((z > 0.0).astype(np.float64))
            else:
                a = np.tanh(z)
                sp.append(1.0 - a * a)
            acts.append(a)
        else:
            out = z
    b = batch.size
    probs = None
    if batch.loss_kind == "mse":
        if batch.targets.shape != out.shape:
            raise ContractError("mse targets shape does not match model outputs")
        resid = out - batch.targets
        loss = 0.5 * float(np.sum(resid * resid)) / b
        out_grad = resid
    else:
        c = model.output_dim
        if c < 2:
            raise ContractError("ce loss requires output_dim >= 2")
        if batch.targets.max() >= c:
            raise ContractError("ce class index out of range")
        shifted = out - out.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.mean(lse - shifted[np.arange(b), batch.targets]))
        probs = _softmax(out)
        out_grad = probs.copy()
        out_grad[np.arange(b), batch.targets] -= 1.0
    G: list[np.ndarray] = [None] * model.n_layers
    G[-1] = out_grad / b
    for l in range(model.n_layers - 1, 0, -1):
        G[l - 1] = (G[l] @ weights[l][0].T) * sp[l - 1]
    parts = [(acts[l].T @ G[l], G[l].sum(axis=0)) for l in range(model.n_layers)]
    grad = _flatten(parts, w.layout)
    return Linearization(
        model=model,
        batch=batch,
        weights=weights,
        acts=acts,
        out=out,
        sp=sp,
        loss=loss,
        out_grad=out_grad,
        G=G,
        grad=grad,
        probs=probs,
    )


def loss_value(model: Model, w: ParamVector, batch: Batch) -> float:
    """Batch loss only (no gradient); used for post-update probes."""
    out = forward(model, w, batch.inputs)
    b = batch.size
    if batch.loss_kind == "mse":
        resid = out - batch.targets
        return 0.5 * float(np.sum(resid * resid)) / b
    shifted = out - out.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(lse - shifted[np.arange(b), batch.targets]))


def loss_and_grad(model: Model, w: ParamVector, batch: Batch) -> tuple[float, ParamVector]:
    lin = linearize(model, w, batch)
    return lin.loss, lin.grad


def hvp(model: Model, w: ParamVector, batch: Batch, v: ParamVector) -> ParamVector:
    return linearize(model, w, batch).hvp(v)


def jvp_outputs(model: Model, w: ParamVector, batch: Batch, v: ParamVector) -> np.ndarray:
    return linearize(model, w, batch).jvp(v)


def vjp_outputs(model: Model, w: ParamVector, batch: Batch, U: np.ndarray) -> ParamVector:
    return linearize(model, w, batch).vjp(U)
