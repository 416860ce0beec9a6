import numpy as np
import pytest

from curvopt.curvature import (
    backproject,
    ggn_matvec,
    hessian_matvec,
    make_snapshot,
    row_gram,
    snapshot_build_count,
)
from curvopt.errors import ContractError
from curvopt.models import Batch, Model, linearize, loss_and_grad, param_layout
from curvopt.numeric import ParamVector, Rng, dot

from test_models import explicit_jacobians, make_params, random_batch


def dense_operator(snapshot, dim):
    """Materialize the snapshot matvec column by column."""
    H = np.zeros((dim, dim))
    like = snapshot.grad
    for j in range(dim):
        e = np.zeros(dim)
        e[j] = 1.0
        H[:, j] = snapshot.matvec(like.like(e)).data
    return H


def scaled_rows(model, w, batch):
    """Explicit scaled-Jacobian row matrix (m, d) for a GGN snapshot."""
    lin = linearize(model, w, batch)
    J = explicit_jacobians(model, w, batch)
    half = lin.hz_half()
    return np.einsum("bij,bjd->bid", half, J).reshape(-1, w.dim)


def test_hessian_snapshot_on_scalar_quadratic():
    m = Model(1, (), 1, "relu")
    w = ParamVector(np.array([3.0, 1.0]), param_layout(m))
    batch = Batch(np.array([[1.0], [0.0]]), np.array([[0.0], [0.0]]), "mse")
    snap = make_snapshot("hessian", m, w, batch)
    loss, grad = loss_and_grad(m, w, batch)
    assert snap.loss_before == pytest.approx(loss)
    assert np.allclose(snap.grad.data, grad.data)
    H = 0.5 * np.array([[1.0, 1.0], [1.0, 2.0]])
    v = np.array([0.4, -1.2])
    assert np.allclose(hessian_matvec(snap, w.like(v)).data, H @ v, atol=1e-14)


def test_ggn_mse_matches_explicit_jacobian():
    m = Model(3, (), 1, "relu")
    w = make_params(m, seed=1)
    batch = random_batch(m, 5, "mse", seed=2)
    snap = make_snapshot("ggn_mse", m, w, batch)
    J = explicit_jacobians(m, w, batch).reshape(5, w.dim)
    v = Rng(3).normal(w.dim)
    expected = J.T @ (J @ v) / 5
    assert np.allclose(ggn_matvec(snap, w.like(v)).data, expected, atol=1e-12)


def test_ggn_ce_matches_dense_assembly():
    m = Model(3, (4,), 3, "tanh")
    w = make_params(m, seed=4)
    batch = random_batch(m, 6, "ce", seed=5)
    lin = linearize(m, w, batch)
    J = explicit_jacobians(m, w, batch)
    G = np.zeros((w.dim, w.dim))
    for i in range(6):
        p = lin.probs[i]
        Hz = np.diag(p) - np.outer(p, p)
        G += J[i].T @ Hz @ J[i]
    G /= 6
    snap = make_snapshot("ggn_ce", m, w, batch)
    assert np.abs(dense_operator(snap, w.dim) - G).max() <= 1e-8


def test_ggn_ce_uniform_softmax_closed_form():
    # Zero logits: H_z = I/c - 11^T/c^2 for every example.
    m = Model(3, (), 4, "relu")
    w = ParamVector(np.zeros(16), param_layout(m))
    batch = random_batch(m, 3, "ce", seed=6)
    lin = linearize(m, w, batch)
    c = 4
    Hz = np.eye(c) / c - np.ones((c, c)) / c**2
    t = Rng(7).normal(3 * c).reshape(3, c)
    assert np.allclose(lin.hz_apply(t), t @ Hz.T, atol=1e-14)


def test_matvec_zero_and_linearity():
    m = Model(3, (4,), 2, "tanh")
    w = make_params(m, seed=8)
    batch = random_batch(m, 4, "mse", seed=9)
    snap = make_snapshot("ggn_mse", m, w, batch)
    assert np.all(ggn_matvec(snap, w.like(np.zeros(w.dim))).data == 0.0)
    rng = Rng(10)
    v = w.like(rng.normal(w.dim))
    u = w.like(rng.normal(w.dim))
    a, b = 0.7, -2.3
    lhs = snap.matvec(w.like(a * v.data + b * u.data)).data
    rhs = a * snap.matvec(v).data + b * snap.matvec(u).data
    assert np.linalg.norm(lhs - rhs) <= 1e-10 * max(np.linalg.norm(rhs), 1.0)
    assert np.allclose(snap.matvec(w.like(3.0 * v.data)).data, 3.0 * snap.matvec(v).data)


def test_hessian_equals_ggn_on_linear_mse_model():
    m = Model(4, (), 2, "relu")
    w = make_params(m, seed=11)
    batch = random_batch(m, 5, "mse", seed=12)
    h_snap = make_snapshot("hessian", m, w, batch)
    g_snap = make_snapshot("ggn_mse", m, w, batch)
    assert np.abs(dense_operator(h_snap, w.dim) - dense_operator(g_snap, w.dim)).max() <= 1e-8


def test_ggn_psd():
    m = Model(3, (5,), 3, "tanh")
    w = make_params(m, seed=13)
    for kind, loss_kind in (("ggn_mse", "mse"), ("ggn_ce", "ce")):
        batch = random_batch(m, 4, loss_kind, seed=14)
        snap = make_snapshot(kind, m, w, batch)
        rng = Rng(15)
        for _ in range(10):
            v = w.like(rng.normal(w.dim))
            quad = dot(v, snap.matvec(v))
            assert quad >= -1e-10 * dot(v, v)


def test_row_gram_hand_case():
    # f(x) = w*x + bias at x=0 twice: scaled rows are [0, 1] each.
    m = Model(1, (), 1, "relu")
    w = ParamVector(np.array([2.0, 0.5]), param_layout(m))
    batch = Batch(np.array([[0.0], [0.0]]), np.array([[0.0], [0.0]]), "mse")
    snap = make_snapshot("ggn_mse", m, w, batch)
    assert np.allclose(row_gram(snap), np.array([[1.0, 1.0], [1.0, 1.0]]))
    # backprojecting (1/3, 1/3) hits only the bias coordinate: 2/3
    out = backproject(snap, np.array([1 / 3, 1 / 3]))
    assert np.allclose(out.data, [0.0, 2 / 3])


@pytest.mark.parametrize("kind,loss_kind", [("ggn_mse", "mse"), ("ggn_ce", "ce")])
def test_row_gram_matches_explicit_rows(kind, loss_kind):
    m = Model(3, (4,), 3, "tanh")
    w = make_params(m, seed=16)
    batch = random_batch(m, 4, loss_kind, seed=17)
    snap = make_snapshot(kind, m, w, batch)
    Jhat = scaled_rows(m, w, batch)
    assert np.abs(row_gram(snap) - Jhat @ Jhat.T).max() <= 1e-10
    # apply / transpose closures agree with the explicit rows
    rng = Rng(18)
    v = rng.normal(w.dim)
    assert np.allclose(snap.row.scaled_row_apply(w.like(v)), Jhat @ v, atol=1e-10)
    u = rng.normal(snap.row.m)
    assert np.allclose(backproject(snap, u).data, Jhat.T @ u, atol=1e-10)


def test_backproject_zero():
    m = Model(3, (4,), 2, "tanh")
    w = make_params(m, seed=19)
    snap = make_snapshot("ggn_mse", m, w, random_batch(m, 3, "mse", seed=20))
    assert np.all(backproject(snap, np.zeros(snap.row.m)).data == 0.0)


@pytest.mark.parametrize("kind,loss_kind", [("ggn_mse", "mse"), ("ggn_ce", "ce")])
def test_factorization_and_rhs_consistency(kind, loss_kind):
    m = Model(4, (5,), 3, "tanh")
    w = make_params(m, seed=21)
    batch = random_batch(m, 5, loss_kind, seed=22)
    snap = make_snapshot(kind, m, w, batch)
    b = batch.size
    v = w.like(Rng(23).normal(w.dim))
    via_rows = snap.row.scaled_row_transpose(snap.row.scaled_row_apply(v)) * (1.0 / b)
    assert np.linalg.norm(via_rows.data - snap.matvec(v).data) <= 1e-10
    grad_rec = snap.row.scaled_row_transpose(snap.row.rhs) * (1.0 / b)
    assert np.linalg.norm(grad_rec.data - snap.grad.data) <= 1e-10


def test_kind_pairing_contracts():
    m = Model(3, (4,), 2, "tanh")
    w = make_params(m, seed=24)
    mse = random_batch(m, 3, "mse", seed=25)
    ce = random_batch(m, 3, "ce", seed=26)
    with pytest.raises(ContractError):
        make_snapshot("ggn_mse", m, w, ce)
    with pytest.raises(ContractError):
        make_snapshot("ggn_ce", m, w, mse)
    h_snap = make_snapshot("hessian", m, w, mse)
    with pytest.raises(ContractError):
        ggn_matvec(h_snap, w)
    with pytest.raises(ContractError):
        row_gram(h_snap)
    g_snap = make_snapshot("ggn_mse", m, w, mse)
    with pytest.raises(ContractError):
        hessian_matvec(g_snap, w)
    with pytest.raises(ContractError):
        backproject(g_snap, np.zeros(99))


def test_snapshot_counter_increments():
    m = Model(3, (4,), 2, "tanh")
    w = make_params(m, seed=27)
    batch = random_batch(m, 3, "mse", seed=28)
    before = snapshot_build_count()
    make_snapshot("ggn_mse", m, w, batch)
    assert snapshot_build_count() == before + 1
    make_snapshot(None, m, w, batch)
    assert snapshot_build_count() == before + 2


def test_degenerate_snapshot_has_loss_and_grad_only():
    m = Model(3, (4,), 2, "tanh")
    w = make_params(m, seed=29)
    batch = random_batch(m, 3, "mse", seed=30)
    snap = make_snapshot(None, m, w, batch)
    loss, grad = loss_and_grad(m, w, batch)
    assert snap.matvec is None and snap.row is None
    assert snap.loss_before == pytest.approx(loss)
    assert np.allclose(snap.grad.data, grad.data)
    assert snap.loss_at(w) == pytest.approx(loss)
