import numpy as np
import pytest

from curvopt.errors import ContractError
from curvopt.numeric import ParamVector
from curvopt.transforms import (
    add_decayed_weights,
    chain_apply,
    chain_init,
    clip_global_norm,
    parse_chain,
    scale,
    scale_by_adam,
    scale_by_schedule,
    schedule_value,
    sophia_clip,
    trace_momentum,
)


def pv(arr):
    arr = np.asarray(arr, dtype=float)
    return ParamVector(arr, (("w", (arr.size,)),))


W = pv([0.5, -1.0])


def apply_once(chain, direction, w=W, t=0, h=None, state=None):
    state = chain_init(chain, w) if state is None else state
    return chain_apply(chain, state, direction, w, t, precond_diag=h)


def test_empty_chain_is_identity():
    out, state = apply_once((), pv([1.0, 2.0]))
    assert np.allclose(out.data, [1.0, 2.0])
    assert state == ()


def test_scale_link():
    out, _ = apply_once((scale(-0.1),), pv([1.0, 2.0]))
    assert np.allclose(out.data, [-0.1, -0.2])


def test_scale_composition():
    rng = np.random.default_rng(0)
    for _ in range(10):
        d = pv(rng.standard_normal(2))
        a, b = rng.standard_normal(2)
        two, _ = apply_once((scale(a), scale(b)), d)
        one, _ = apply_once((scale(a * b),), d)
        assert np.allclose(two.data, one.data)


def test_clip_global_norm():
    out, _ = apply_once((clip_global_norm(1.0),), pv([3.0, 4.0]))
    assert np.allclose(out.data, [0.6, 0.8])
    small, _ = apply_once((clip_global_norm(10.0),), pv([3.0, 4.0]))
    assert np.allclose(small.data, [3.0, 4.0])


def test_clip_global_norm_idempotent():
    chain = (clip_global_norm(2.5),)
    once, _ = apply_once(chain, pv([5.0, -12.0]))
    twice, _ = apply_once(chain, once)
    assert np.allclose(once.data, twice.data)


def test_trace_momentum_first_call_passes_direction():
    chain = (trace_momentum(0.9), scale(-1.0))
    g = pv([1.0, -2.0])
    out, state = apply_once(chain, g)
    assert np.allclose(out.data, -g.data)
    # second call accumulates the trace
    out2, _ = chain_apply(chain, state, g, W, 1)
    assert np.allclose(out2.data, -(0.9 * g.data + g.data))


def test_add_decayed_weights():
    out, _ = apply_once((add_decayed_weights(0.1),), pv([1.0, 1.0]))
    assert np.allclose(out.data, [1.0 + 0.05, 1.0 - 0.1])


def test_adam_constant_stream_closed_form():
    chain = (scale_by_adam(0.9, 0.999, 1e-8),)
    g = np.array([0.3, -2.0])
    state = chain_init(chain, W)
    for t in range(5):
        out, state = chain_apply(chain, state, pv(g), W, t)
        # bias-corrected moments of a constant stream recover g exactly
        expected = g / (np.abs(g) + 1e-8)
        assert np.allclose(out.data, expected, atol=1e-12)


def test_adam_scaled_descent_magnitude():
    chain = (scale_by_adam(), scale(0.05), scale(-1.0))
    out, _ = apply_once(chain, pv([4.0, -4.0]))
    assert np.allclose(np.abs(out.data), 0.05, atol=1e-8)


def test_sophia_clip_semantics():
    h = pv([2.0, 2.0])
    chain = (sophia_clip(0.5, 1e-12),)
    out, _ = apply_once(chain, pv([10.0, 0.5]), h=h)
    # 10/1 clamps to 1; 0.5/1 stays
    assert np.allclose(out.data, [1.0, 0.5])
    with pytest.raises(ContractError):
        apply_once(chain, pv([1.0, 1.0]), h=None)


def test_sophia_clip_scale_invariant_sign_pattern():
    rng = np.random.default_rng(1)
    for _ in range(10):
        d = rng.standard_normal(6)
        h = np.abs(rng.standard_normal(6)) + 0.1
        chain = (sophia_clip(0.3, 1e-12),)
        layout = (("w", (6,)),)
        w6 = ParamVector(np.zeros(6), layout)
        out1, _ = chain_apply(chain, chain_init(chain, w6), ParamVector(d, layout), w6, 0, precond_diag=ParamVector(h, layout))
        c = float(rng.uniform(0.5, 10.0))
        out2, _ = chain_apply(chain, chain_init(chain, w6), ParamVector(c * d, layout), w6, 0, precond_diag=ParamVector(c * h, layout))
        assert np.array_equal(np.sign(out1.data), np.sign(out2.data))
        assert np.all(np.abs(out1.data) <= 1.0)
        assert np.all(np.abs(out2.data) <= 1.0)


def test_schedule_values():
    assert schedule_value("constant", 100, {"alpha0": 0.3}) == 0.3
    assert schedule_value("step_decay", 0, {"alpha0": 1.0, "gamma": 0.5, "period": 10}) == 1.0
    assert schedule_value("step_decay", 25, {"alpha0": 1.0, "gamma": 0.5, "period": 10}) == 0.25
    cos = {"alpha0": 0.1, "warmup": 2000, "total": 10000}
    assert schedule_value("cosine_warmup", 0, cos) == 0.0
    assert schedule_value("cosine_warmup", 1000, cos) == pytest.approx(0.05)
    assert schedule_value("cosine_warmup", 2000, cos) == pytest.approx(0.1)
    assert schedule_value("cosine_warmup", 10000, cos) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ContractError):
        schedule_value("constant", -1, {})


def test_schedule_link_uses_step():
    chain = (scale_by_schedule("cosine_warmup", alpha0=1.0, warmup=10, total=20),)
    state = chain_init(chain, W)
    out0, state = chain_apply(chain, state, pv([1.0, 1.0]), W, 0)
    assert np.allclose(out0.data, 0.0)
    out5, _ = chain_apply(chain, state, pv([1.0, 1.0]), W, 5)
    assert np.allclose(out5.data, 0.5)


def test_descent_chain_decreases_quadratic_loss():
    # gradient descent on f(x) = 0.5 x^2 via the chain contract w <- w + update
    chain = (scale_by_schedule("constant", alpha0=0.1), scale(-1.0))
    state = chain_init(chain, pv([0.0]))
    x = 3.0
    losses = [0.5 * x * x]
    for t in range(100):
        update, state = chain_apply(chain, state, pv([x]), pv([x]), t)
        x = x + float(update.data[0])
        losses.append(0.5 * x * x)
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_chain_state_length_contract():
    chain = (trace_momentum(0.9),)
    with pytest.raises(ContractError):
        chain_apply(chain, (), pv([1.0, 1.0]), W, 0)


def test_parse_chain_round_trip():
    raw = [
        {"kind": "scale", "params": {"value": -0.5}},
        {"kind": "trace_momentum", "params": {"beta": 0.9}},
    ]
    chain = parse_chain(raw)
    assert chain[0].kind == "scale" and chain[0].params["value"] == -0.5
    assert parse_chain(chain) == chain
    with pytest.raises(ContractError):
        parse_chain([{"kind": "unknown_link", "params": {}}])
