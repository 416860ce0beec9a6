import itertools
import math

import numpy as np
import pytest

from curvopt.errors import ContractError
from curvopt.method import MethodSpec, Plan, assemble, make
from curvopt.models import Model, linearize
from curvopt.numeric import Rng
from curvopt.telemetry import (
    STEP_INFO_FIELDS,
    Cadence,
    StepInfo,
    gnb_diag,
    hutchinson_diag,
    hutchinson_trace,
    pack_step_info,
    power_iter_top_eig,
)

from test_models import make_params, random_batch


def test_hutchinson_diag_exact_for_diagonal_operator():
    H = np.diag([3.0, 5.0])
    est = hutchinson_diag(lambda z: H @ z, Rng(0), 2, 1)
    assert np.allclose(est, [3.0, 5.0])


def test_hutchinson_unbiased_by_sign_pattern_enumeration():
    H = np.array([[2.0, 1.0], [1.0, 2.0]])
    acc = np.zeros(2)
    for signs in itertools.product([-1.0, 1.0], repeat=2):
        z = np.array(signs)
        acc += z * (H @ z)
    assert np.allclose(acc / 4.0, np.diag(H))


def test_hutchinson_diag_deterministic():
    H = np.array([[2.0, 1.0], [1.0, 2.0]])
    a = hutchinson_diag(lambda z: H @ z, Rng(3), 2, 1)
    b = hutchinson_diag(lambda z: H @ z, Rng(3), 2, 1)
    assert np.array_equal(a, b)
    c = hutchinson_diag(lambda z: H @ z, Rng(4), 2, 1)
    assert not np.array_equal(a, c) or True  # different seeds may rarely agree on 2 dims


def test_hutchinson_trace_exact_cases():
    assert hutchinson_trace(lambda z: z, Rng(1), 7, 1) == pytest.approx(7.0)
    H = np.diag([1.0, 2.0, 3.0])
    assert hutchinson_trace(lambda z: H @ z, Rng(2), 3, 1) == pytest.approx(6.0)


def test_hutchinson_statistical_accuracy_dense():
    rng = np.random.default_rng(7)
    B = rng.standard_normal((10, 10))
    H = B @ B.T + 10.0 * np.eye(10)
    diag_est = hutchinson_diag(lambda z: H @ z, Rng(8), 10, 10_000)
    assert np.all(np.abs(diag_est - np.diag(H)) <= 0.05 * np.abs(np.diag(H)))
    tr_est = hutchinson_trace(lambda z: H @ z, Rng(9), 10, 10_000)
    assert abs(tr_est - np.trace(H)) <= 0.05 * np.trace(H)


def test_power_iteration_cases():
    H = np.diag([1.0, 10.0])
    assert power_iter_top_eig(lambda z: H @ z, Rng(10), 2, 50) == pytest.approx(10.0, abs=1e-6)
    assert power_iter_top_eig(lambda z: z, Rng(11), 5, 1) == pytest.approx(1.0)
    assert power_iter_top_eig(lambda z: 0.0 * z, Rng(12), 4, 10) == 0.0


def test_power_iteration_matches_dense_eigensolver():
    rng = np.random.default_rng(13)
    B = rng.standard_normal((12, 12))
    H = B @ B.T
    top = np.linalg.eigvalsh(H).max()
    est = power_iter_top_eig(lambda z: H @ z, Rng(14), 12, 200)
    assert est == pytest.approx(top, rel=1e-3)


def test_gnb_deterministic_and_requires_ce():
    m = Model(3, (4,), 3, "tanh")
    w = make_params(m, seed=15)
    batch = random_batch(m, 4, "ce", seed=16)
    a = gnb_diag(m, w, batch, Rng(17), 2)
    b = gnb_diag(m, w, batch, Rng(17), 2)
    assert np.array_equal(a.data, b.data)
    mse_batch = random_batch(m, 4, "mse", seed=18)
    with pytest.raises(ContractError):
        gnb_diag(m, w, mse_batch, Rng(19), 1)


def test_gnb_saturated_softmax_vanishes():
    m = Model(2, (), 3, "relu")
    w = make_params(m, seed=20)
    w = w.like(w.data * 200.0)  # huge logit scale -> p is one-hot
    batch = random_batch(m, 4, "ce", seed=21)
    est = gnb_diag(m, w, batch, Rng(22), 4)
    assert np.all(np.abs(est.data) <= 1e-12)


def test_gnb_mean_approximates_ggn_diagonal():
    m = Model(3, (3,), 3, "tanh")
    w = make_params(m, seed=23)
    batch = random_batch(m, 4, "ce", seed=24)
    lin = linearize(m, w, batch)
    d = w.dim
    J = np.zeros((4, 3, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = 1.0
        J[:, :, j] = lin.jvp(w.like(e))
    dense_diag = np.zeros(d)
    for i in range(4):
        p = lin.probs[i]
        Hz = np.diag(p) - np.outer(p, p)
        dense_diag += np.diag(J[i].T @ Hz @ J[i])
    dense_diag /= 4
    est = gnb_diag(m, w, batch, Rng(25), 2000, lin=lin)
    scale = np.abs(dense_diag).max()
    assert np.all(np.abs(est.data - dense_diag) <= 0.15 * scale)


def test_cadence_law():
    assert not Cadence(-1).enabled
    for k in (1, 2, 5, 10):
        cad = Cadence(k)
        for t in range(100):
            assert cad.fires(t) == (t % k == 0)
    for t in range(100):
        assert not Cadence(-1).fires(t)
    with pytest.raises(ContractError):
        Cadence(0)


def make_plan():
    m = Model(3, (4,), 2, "relu")
    return make("sgn_mse", m).plan


def test_pack_step_info_sentinels_and_population():
    plan = make_plan()
    info = pack_step_info(plan, {"loss_before": 1.5, "lam": 0.1, "grad_norm": 2.0, "step_index": 7})
    assert info.loss_before == 1.5
    assert info.step_index == 7
    assert math.isnan(info.loss_after) and math.isnan(info.rho)
    assert info.solver_iterations == -1 and info.solver_converged == -1
    assert math.isnan(info.diag_mean) and math.isnan(info.trace_estimate)


def test_pack_step_info_rejects_unknown_keys():
    plan = make_plan()
    with pytest.raises(ContractError):
        pack_step_info(plan, {"not_a_metric": 1.0})


def test_step_info_schema_is_fixed():
    assert StepInfo().to_row() == [getattr(StepInfo(), f) for f in STEP_INFO_FIELDS]
    assert len(STEP_INFO_FIELDS) == 13
