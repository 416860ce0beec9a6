"""Chainable post-direction update transforms.

A chain is an ordered list of links applied left to right to the solver's
direction; the empty chain is the identity. Chains produce an *additive*
update (w <- w + update), so descent chains end with a negative scale.

Stateful links (momentum trace, Adam moments) thread their state through
ChainState, a tuple of per-link dicts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from .errors import ContractError
from .numeric import ParamVector, zeros

LINK_KINDS = (
    "scale",
    "scale_by_schedule",
    "trace_momentum",
    "clip_global_norm",
    "add_decayed_weights",
    "scale_by_adam",
    "sophia_clip",
)


_REQUIRED_PARAMS = {
    "scale": ("value",),
    "scale_by_schedule": ("schedule",),
    "trace_momentum": ("beta",),
    "clip_global_norm": ("max_norm",),
    "add_decayed_weights": ("weight_decay",),
    "scale_by_adam": (),
    "sophia_clip": ("gamma",),
}

_DEFAULT_PARAMS = {
    "scale_by_adam": {"b1": 0.9, "b2": 0.999, "eps": 1e-8},
    "sophia_clip": {"eps": 1e-12},
}


@dataclass(frozen=True)
class Link:
    kind: str
    params: Mapping[str, Any]

    def __post_init__(self):
        if self.kind not in LINK_KINDS:
            raise ContractError(f"unknown transform link kind {self.kind!r}")
        params = {**_DEFAULT_PARAMS.get(self.kind, {}), **dict(self.params)}
        missing = [k for k in _REQUIRED_PARAMS[self.kind] if k not in params]
        if missing:
            raise ContractError(f"link {self.kind!r} missing params {missing}")
        object.__setattr__(self, "params", params)


TransformChain = tuple[Link, ...]
ChainState = tuple[dict, ...]


def scale(value: float) -> Link:
    return Link("scale", {"value": float(value)})


def scale_by_schedule(schedule: str = "constant", **params: float) -> Link:
    return Link("scale_by_schedule", {"schedule": schedule, **params})


def trace_momentum(beta: float) -> Link:
    return Link("trace_momentum", {"beta": float(beta)})


def clip_global_norm(max_norm: float) -> Link:
    return Link("clip_global_norm", {"max_norm": float(max_norm)})


def add_decayed_weights(weight_decay: float) -> Link:
    return Link("add_decayed_weights", {"weight_decay": float(weight_decay)})


def scale_by_adam(b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> Link:
    return Link("scale_by_adam", {"b1": float(b1), "b2": float(b2), "eps": float(eps)})


def sophia_clip(gamma: float, eps: float = 1e-12) -> Link:
    return Link("sophia_clip", {"gamma": float(gamma), "eps": float(eps)})


def parse_chain(raw) -> TransformChain:
    """Accept Link objects or {"kind":..., "params": {...}} records."""
    links = []
    for item in raw:
        if isinstance(item, Link):
            links.append(item)
        elif isinstance(item, Mapping):
            links.append(Link(item["kind"], dict(item.get("params", {}))))
        else:
            raise ContractError(f"cannot parse chain link {item!r}")
    return tuple(links)


def chain_to_config(chain: TransformChain) -> list[dict]:
    return [{"kind": link.kind, "params": dict(link.params)} for link in chain]


def schedule_value(kind: str, t: int, params: Mapping[str, float]) -> float:
    """Learning-rate schedules: constant, step decay, cosine with linear warmup."""
    if t < 0:
        raise ContractError("schedule step must be >= 0")
    alpha0 = float(params.get("alpha0", 1.0))
    if kind == "constant":
        return alpha0
    if kind == "step_decay":
        gamma = float(params.get("gamma", 0.1))
        period = int(params.get("period", 1000))
        return alpha0 * gamma ** (t // period)
    if kind == "cosine_warmup":
        warmup = int(params.get("warmup", 0))
        total = int(params["total"])
        if warmup > 0 and t < warmup:
            return alpha0 * t / warmup
        span = max(total - warmup, 1)
        progress = min((t - warmup) / span, 1.0)
        return 0.5 * alpha0 * (1.0 + math.cos(math.pi * progress))
    raise ContractError(f"unknown schedule kind {kind!r}")


def chain_init(chain: TransformChain, w: ParamVector) -> ChainState:
    """Zero traces and moments, counters at 0; stateless links get empty records."""
    state = []
    for link in chain:
        if link.kind == "trace_momentum":
            state.append({"trace": np.zeros(w.dim)})
        elif link.kind == "scale_by_adam":
            state.append({"m": np.zeros(w.dim), "v": np.zeros(w.dim), "t": 0})
        else:
            state.append({})
    return tuple(state)


def chain_apply(
    chain: TransformChain,
    state: ChainState,
    direction: ParamVector,
    w: ParamVector,
    t: int,
    precond_diag: ParamVector | None = None,
) -> tuple[ParamVector, ChainState]:
    """Run the chain on `direction`; returns (update, new state)."""
    if direction.layout != w.layout:
        raise ContractError("direction layout does not match parameters")
    if len(state) != len(chain):
        raise ContractError("chain state length does not match chain")
    x = direction.data.copy()
    new_state = []
    for link, st in zip(chain, state):
        p = link.params
        if link.kind == "scale":
            x *= p["value"]
            new_state.append({})
        elif link.kind == "scale_by_schedule":
            x *= schedule_value(p["schedule"], t, p)
            new_state.append({})
        elif link.kind == "trace_momentum":
            m = p["beta"] * st["trace"] + x
            x = m.copy()
            new_state.append({"trace": m})
        elif link.kind == "clip_global_norm":
            norm = float(np.linalg.norm(x))
            if norm > p["max_norm"] and norm > 0.0:
                x *= p["max_norm"] / norm
            new_state.append({})
        elif link.kind == "add_decayed_weights":
            x += p["weight_decay"] * w.data
            new_state.append({})
        elif link.kind == "scale_by_adam":
            tt = st["t"] + 1
            m = p["b1"] * st["m"] + (1.0 - p["b1"]) * x
            v = p["b2"] * st["v"] + (1.0 - p["b2"]) * (x * x)
            mhat = m / (1.0 - p["b1"] ** tt)
            vhat = v / (1.0 - p["b2"] ** tt)
            x = mhat / (np.sqrt(vhat) + p["eps"])
            new_state.append({"m": m, "v": v, "t": tt})
        elif link.kind == "sophia_clip":
            if precond_diag is None:
                raise ContractError("sophia_clip requires a preconditioner diagonal")
            denom = np.maximum(p["gamma"] * precond_diag.data, p["eps"])
            x = np.clip(x / denom, -1.0, 1.0)
            new_state.append({})
        else:  # pragma: no cover - guarded by Link validation
            raise ContractError(f"unknown link kind {link.kind!r}")
    return w.like(x), tuple(new_state)
