import math

import numpy as np
import pytest

from lst.factored import factored_new, factored_step, materialize
from lst.minibatch import (
    SOLVE_EACH_BATCH,
    WOODBURY,
    InverseStrategy,
    SingularBatchUpdate,
    default_strategy,
    minibatch_step,
    solve_inverse_transpose_apply,
    woodbury_update_inverse,
)
from lst.naive import NaiveOutputLayer, naive_step_minibatch
from lst.sparse import random_sparse


def rel_fro(A, B):
    return np.linalg.norm(A - B) / max(np.linalg.norm(B), 1e-300)


def copy_layer(layer):
    import dataclasses

    return dataclasses.replace(
        layer, V=layer.V.copy(), U=layer.U.copy(), Uinv_t=layer.Uinv_t.copy(), Q=layer.Q.copy()
    )


def make_batch(rng, d, D, K, m):
    H = rng.standard_normal((d, m)) / math.sqrt(d)
    Y = [random_sparse(rng, D, K) for _ in range(m)]
    return H, Y


# --- strategy selection


def test_default_strategy_crossover():
    assert default_strategy(8, 32) == WOODBURY
    assert default_strategy(9, 32) == SOLVE_EACH_BATCH
    assert default_strategy(4, 32, crossover=3) == SOLVE_EACH_BATCH
    with pytest.raises(ValueError):
        InverseStrategy("cholesky")


# --- woodbury update


def test_woodbury_m1_diagonal_case():
    # U = I, h = e1, eta = 1/4: U_new = diag(1/2, 1, ...), so U_new^{-T} = diag(2, 1, ...)
    d = 4
    Uinv_t = np.eye(d)
    H = np.zeros((d, 1))
    H[0, 0] = 1.0
    out = woodbury_update_inverse(Uinv_t, H, eta=0.25)
    assert np.max(np.abs(out - np.diag([2.0, 1.0, 1.0, 1.0]))) < 1e-12


def test_woodbury_zero_h_is_noop():
    rng = np.random.default_rng(0)
    Uinv_t = rng.standard_normal((5, 5))
    out = woodbury_update_inverse(Uinv_t, np.zeros((5, 2)), eta=0.1)
    assert np.array_equal(out, Uinv_t)


def test_woodbury_against_direct_inversion():
    rng = np.random.default_rng(1)
    d, m = 8, 3
    U = np.eye(d) + 0.3 * rng.standard_normal((d, d))
    H = rng.standard_normal((d, m)) / math.sqrt(d)
    eta = 0.05
    U_new = U - 2 * eta * (U @ H) @ H.T
    out = woodbury_update_inverse(np.linalg.inv(U).T, H, eta)
    assert np.max(np.abs(out.T @ U_new - np.eye(d))) < 1e-10
    assert np.max(np.abs(out - np.linalg.inv(U_new).T)) < 1e-10


def test_woodbury_m1_matches_sherman_morrison():
    rng = np.random.default_rng(2)
    for _ in range(20):
        d = int(rng.integers(2, 10))
        U = np.eye(d) + 0.2 * rng.standard_normal((d, d))
        Uinv_t = np.linalg.inv(U).T
        h = rng.standard_normal(d)
        eta = float(rng.uniform(0.01, 0.2)) / max(1.0, h @ h)
        denom = 1.0 - 2.0 * eta * (h @ h)
        sherman = Uinv_t + (2 * eta / denom) * np.outer(Uinv_t @ h, h)
        woodbury = woodbury_update_inverse(Uinv_t, h[:, None], eta)
        assert np.max(np.abs(sherman - woodbury)) < 1e-12


def test_woodbury_singular_system_raises():
    # m = 1 with |h|^2 = 1/(2 eta) makes the 1x1 system exactly zero
    d = 4
    h = np.zeros((d, 1))
    h[0, 0] = np.sqrt(1.0 / (2 * 0.125))
    with pytest.raises(SingularBatchUpdate):
        woodbury_update_inverse(np.eye(d), h, eta=0.125)


# --- solve path


def test_solve_identity_returns_h():
    H = np.random.default_rng(3).standard_normal((4, 2))
    assert np.array_equal(solve_inverse_transpose_apply(np.eye(4), H), H)


def test_solve_diagonal_case():
    U_new = np.diag([2.0, 4.0])
    H = np.array([[2.0], [4.0]])
    assert np.allclose(solve_inverse_transpose_apply(U_new, H), [[1.0], [1.0]])


def test_solve_matches_explicit_inverse():
    rng = np.random.default_rng(4)
    U_new = np.eye(16) + 0.2 * rng.standard_normal((16, 16))
    H = rng.standard_normal((16, 8))
    expect = np.linalg.inv(U_new).T @ H
    assert np.max(np.abs(solve_inverse_transpose_apply(U_new, H) - expect)) < 1e-10


def test_solve_singular_raises():
    with pytest.raises(np.linalg.LinAlgError):
        solve_inverse_transpose_apply(np.zeros((3, 3)), np.ones((3, 1)))


# --- minibatch step semantics


def test_batch_of_one_matches_online_step():
    rng = np.random.default_rng(5)
    a = factored_new(50, 6, "random", seed=6)
    b = copy_layer(a)
    h = rng.standard_normal(6)
    y = random_sparse(rng, 50, 3)
    eta = 0.04
    res_a = factored_step(a, h, y, eta)
    res_b = minibatch_step(b, h[:, None], [y], eta, strategy=WOODBURY)
    assert res_b.loss_total == pytest.approx(res_a.loss, rel=1e-12)
    assert np.allclose(res_b.grad_H[:, 0], res_a.grad_h, rtol=1e-12, atol=1e-14)
    for k in ("V", "U", "Uinv_t", "Q"):
        assert rel_fro(getattr(b, k), getattr(a, k)) < 1e-12


def test_eta_zero_keeps_state():
    layer = factored_new(40, 5, "random", seed=7)
    snap = {k: getattr(layer, k).copy() for k in ("V", "U", "Uinv_t", "Q")}
    rng = np.random.default_rng(8)
    H, Y = make_batch(rng, 5, 40, 3, 4)
    res = minibatch_step(layer, H, Y, 0.0)
    W = materialize(layer)
    expect = sum(np.linalg.norm(W @ H[:, i] - Y[i].to_dense()) ** 2 for i in range(4))
    assert res.loss_total == pytest.approx(expect, rel=1e-12)
    for k, v in snap.items():
        assert np.array_equal(getattr(layer, k), v)


@pytest.mark.parametrize("strategy", [WOODBURY, SOLVE_EACH_BATCH], ids=lambda s: s.mode)
def test_lockstep_equivalence_30_batches(strategy):
    D, d, K, m, eta = 300, 16, 6, 8, 0.01
    layer = factored_new(D, d, "random", seed=9)
    oracle = NaiveOutputLayer(materialize(layer))
    rng = np.random.default_rng(10)
    for _ in range(30):
        H, Y = make_batch(rng, d, D, K, m)
        res = minibatch_step(layer, H, Y, eta, strategy=strategy)
        loss, grad_H = naive_step_minibatch(oracle, H, Y, eta)
        assert abs(res.loss_total - loss) <= 1e-8 * abs(loss)
        assert np.allclose(res.grad_H, grad_H, rtol=1e-8, atol=1e-12)
    assert rel_fro(materialize(layer), oracle.W) < 1e-6


def test_strategies_agree():
    rng = np.random.default_rng(11)
    a = factored_new(60, 8, "random", seed=12)
    b = copy_layer(a)
    H, Y = make_batch(rng, 8, 60, 4, 5)
    minibatch_step(a, H, Y, 0.05, strategy=WOODBURY)
    minibatch_step(b, H, Y, 0.05, strategy=SOLVE_EACH_BATCH)
    assert np.array_equal(a.U, b.U)
    assert np.array_equal(a.Q, b.Q)
    assert rel_fro(b.V, a.V) < 1e-9


def test_q_identity_after_batch():
    layer = factored_new(80, 6, "random", seed=13)
    rng = np.random.default_rng(14)
    for _ in range(10):
        H, Y = make_batch(rng, 6, 80, 4, 4)
        minibatch_step(layer, H, Y, 0.03)
        W = materialize(layer)
        assert rel_fro(layer.Q, W.T @ W) < 1e-8


def test_trace_of_m_is_sum_of_losses():
    layer = factored_new(70, 6, "random", seed=15)
    rng = np.random.default_rng(16)
    H, Y = make_batch(rng, 6, 70, 4, 5)
    W = materialize(layer)
    expect = sum(np.linalg.norm(W @ H[:, i] - Y[i].to_dense()) ** 2 for i in range(5))
    res = minibatch_step(layer, H, Y, 0.02, verify_loss_trace=True)
    assert res.loss_matrix_trace_checked
    assert res.loss_total == pytest.approx(expect, rel=1e-8)


def test_solve_path_marks_uinv_stale_and_recovers():
    layer = factored_new(50, 6, "random", seed=17)
    oracle = NaiveOutputLayer(materialize(layer))
    rng = np.random.default_rng(18)
    H, Y = make_batch(rng, 6, 50, 3, 4)
    minibatch_step(layer, H, Y, 0.05, strategy=SOLVE_EACH_BATCH)
    naive_step_minibatch(oracle, H, Y, 0.05)
    assert layer.uinv_stale
    # a following online step must refresh the inverse lazily and stay exact
    h = rng.standard_normal(6)
    y = random_sparse(rng, 50, 3)
    from lst.naive import naive_step

    res = factored_step(layer, h, y, 0.05)
    ref = naive_step(oracle, h, y, 0.05)
    assert not layer.uinv_stale
    assert res.loss == pytest.approx(ref.loss, rel=1e-10)
    assert rel_fro(materialize(layer), oracle.W) < 1e-10


def test_mixed_strategy_session_stays_exact():
    D, d, K, m = 120, 8, 4, 4
    layer = factored_new(D, d, "random", seed=19)
    oracle = NaiveOutputLayer(materialize(layer))
    rng = np.random.default_rng(20)
    strategies = [SOLVE_EACH_BATCH, WOODBURY, SOLVE_EACH_BATCH, WOODBURY, WOODBURY]
    for strat in strategies:
        H, Y = make_batch(rng, d, D, K, m)
        res = minibatch_step(layer, H, Y, 0.03, strategy=strat)
        loss, _ = naive_step_minibatch(oracle, H, Y, 0.03)
        assert abs(res.loss_total - loss) <= 1e-9 * abs(loss)
    assert rel_fro(materialize(layer), oracle.W) < 1e-9


def test_dimension_errors():
    layer = factored_new(30, 4)
    rng = np.random.default_rng(21)
    H = rng.standard_normal((5, 2))
    with pytest.raises(ValueError):
        minibatch_step(layer, H, [random_sparse(rng, 30, 2)] * 2, 0.1)
    H = rng.standard_normal((4, 2))
    with pytest.raises(ValueError):
        minibatch_step(layer, H, [random_sparse(rng, 30, 2)], 0.1)
    with pytest.raises(ValueError):
        minibatch_step(layer, H, [random_sparse(rng, 31, 2)] * 2, 0.1)
