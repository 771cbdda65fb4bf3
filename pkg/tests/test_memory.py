import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaitsf.memory import (BankError, MomentumSchedule, cluster_nce, init_bank, momentum_at,
                           momentum_update, multi_cluster_update)


def unit(x):
    x = np.asarray(x, dtype=float)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def rand_unit(r, n, d=8):
    return unit(r.normal(size=(n, d)))


def softmax_oracle(q, C, y, tau):
    """Per-query -log softmax written with plain math (no stabilization)."""
    out = []
    for qi, yi in zip(q, y):
        ex = [math.exp(float(qi @ c) / tau) for c in C]
        out.append(-math.log(ex[yi] / sum(ex)))
    return float(np.mean(out))


# ---------------------------------------------------------------- bank

def test_init_single_and_roundtrip():
    C = unit([[0.3, 0.4]])
    b = init_bank(C)
    assert b.n_clusters == 1
    assert np.array_equal(b.centroids, C)
    C[0, 0] = 9.0
    assert b.centroids[0, 0] != 9.0  # copy, no aliasing


def test_init_errors():
    with pytest.raises(BankError):
        init_bank(np.zeros((0, 4)))
    with pytest.raises(BankError):
        init_bank([[1.0, 1.0]])
    with pytest.raises(BankError):
        init_bank([[1.0, 0.0]], tau=0)


# ---------------------------------------------------------------- loss

def test_single_cluster_zero_loss():
    b = init_bank([[1.0, 0.0]])
    rep = cluster_nce(b, unit([[0.6, 0.8]]), [0])
    assert rep.loss == 0.0
    assert not rep.grads.any()


def test_two_orthogonal_example():
    b = init_bank(np.eye(2), tau=1.0)
    rep = cluster_nce(b, [[1.0, 0.0]], [0])
    assert rep.loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert rep.loss == pytest.approx(0.313262, abs=1e-6)
    assert rep.loss == pytest.approx(softmax_oracle(np.eye(2)[:1], np.eye(2), [0], 1.0), abs=1e-14)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=40)
def test_loss_matches_independent_softmax(seed):
    r = np.random.default_rng(seed)
    Q, B = int(r.integers(1, 8)), int(r.integers(1, 6))
    tau = float(r.uniform(0.05, 1))
    C, q = rand_unit(r, Q), rand_unit(r, B)
    y = r.integers(0, Q, size=B)
    rep = cluster_nce(init_bank(C, tau), q, y)
    assert rep.loss == pytest.approx(softmax_oracle(q, C, y, tau), rel=1e-10, abs=1e-12)
    assert rep.loss >= 0
    assert np.allclose(rep.positive_logits, np.sum(q * C[y], axis=1) / tau)


def test_gradient_finite_differences():
    eps = 1e-5  # same step as the encoder check; 1e-6 is dominated by rounding
    worst = 0.0
    for draw in range(50):
        r = np.random.default_rng(draw)
        Q, B = int(r.integers(2, 8)), int(r.integers(1, 5))
        tau = float(r.uniform(0.5, 1.0))
        bank = init_bank(rand_unit(r, Q), tau)
        q = rand_unit(r, B)
        y = r.integers(0, Q, size=B)
        an = cluster_nce(bank, q, y).grads
        num = np.zeros_like(q)
        for ix in np.ndindex(q.shape):
            qp, qm = q.copy(), q.copy()
            qp[ix] += eps
            qm[ix] -= eps
            num[ix] = (cluster_nce(bank, qp, y, check_unit=False).loss
                       - cluster_nce(bank, qm, y, check_unit=False).loss) / (2 * eps)
        rel = np.abs(an - num) / np.maximum(np.maximum(np.abs(an), np.abs(num)), 1e-6)
        worst = max(worst, float(rel.max()))
    assert worst < 1e-6


def test_label_out_of_range():
    b = init_bank(np.eye(3))
    with pytest.raises(BankError):
        cluster_nce(b, np.eye(3)[:1], [3])
    with pytest.raises(BankError):
        cluster_nce(b, np.eye(3)[:1], [-1])


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=40)
def test_negative_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    Q = int(r.integers(2, 9))
    C, q = rand_unit(r, Q), rand_unit(r, 1)
    base = cluster_nce(init_bank(C), q, [0]).loss
    perm = np.concatenate([[0], 1 + r.permutation(Q - 1)])
    assert cluster_nce(init_bank(C[perm]), q, [0]).loss == pytest.approx(base, rel=1e-12)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=40)
def test_duplicate_positive_increases_loss(seed):
    r = np.random.default_rng(seed)
    Q = int(r.integers(1, 6))
    C, q = rand_unit(r, Q), rand_unit(r, 1)
    y = int(r.integers(0, Q))
    tau = float(r.uniform(0.05, 1))
    base = cluster_nce(init_bank(C, tau), q, [y]).loss
    more = cluster_nce(init_bank(np.vstack([C, C[y:y + 1]]), tau), q, [y]).loss
    assert more > base


def test_stable_at_small_tau():
    r = np.random.default_rng(0)
    C = rand_unit(r, 10)
    q = C[:3].copy()  # logits reach 1 / tau = 1000
    rep = cluster_nce(init_bank(C, 1e-3), q, [4, 5, 6])
    assert np.isfinite(rep.loss) and np.all(np.isfinite(rep.grads))
    assert rep.loss > 100


# ---------------------------------------------------------------- updates

def test_momentum_examples():
    b = init_bank([[1.0, 0.0], [0.0, 1.0]])
    before = b.centroids.copy()
    momentum_update(b, unit([0.6, 0.8]), 0, m=1.0)
    assert np.array_equal(b.centroids, before)
    momentum_update(b, unit([0.6, 0.8]), 0, m=0.0)
    assert np.allclose(b.centroids[0], [0.6, 0.8])
    b = init_bank([[1.0, 0.0], [0.0, 1.0]])
    momentum_update(b, [0.0, 1.0], 0, m=0.5)
    assert np.allclose(b.centroids[0], [math.sqrt(2) / 2] * 2, atol=1e-15)
    assert np.array_equal(b.centroids[1], [0.0, 1.0])


def test_momentum_invalid_id():
    b = init_bank(np.eye(2))
    with pytest.raises(BankError):
        momentum_update(b, [1.0, 0], 2)
    with pytest.raises(BankError):
        multi_cluster_update(b, [1.0, 0], [0, 5])
    with pytest.raises(BankError):
        multi_cluster_update(b, [1.0, 0], [])


def test_multi_update_examples():
    r = np.random.default_rng(1)
    C = rand_unit(r, 4)
    q = rand_unit(r, 1)[0]
    a, b = init_bank(C), init_bank(C)
    multi_cluster_update(a, q, [2], m=0.3)
    momentum_update(b, q, 2, m=0.3)
    assert np.array_equal(a.centroids, b.centroids)
    c = init_bank(C)
    multi_cluster_update(c, q, [0, 1], m=0.3)
    assert np.array_equal(c.centroids[2:], C[2:])
    assert not np.allclose(c.centroids[:2], C[:2])
    d = init_bank(C)
    multi_cluster_update(d, q, [0, 1], m=1.0)
    multi_cluster_update(d, rand_unit(r, 1)[0], [2, 3], m=1.0)
    assert np.array_equal(d.centroids, C)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30)
def test_centroids_stay_unit_norm(seed):
    r = np.random.default_rng(seed)
    Q = int(r.integers(1, 6))
    b = init_bank(rand_unit(r, Q))
    for _ in range(50):
        q = rand_unit(r, 1)[0]
        m = float(r.uniform(0, 1))
        if r.random() < 0.5:
            momentum_update(b, q, int(r.integers(0, Q)), m=m)
        else:
            multi_cluster_update(b, q, r.choice(Q, size=int(r.integers(1, Q + 1)),
                                               replace=False).tolist(), m=m)
    assert np.all(np.abs(np.linalg.norm(b.centroids, axis=1) - 1) <= 1e-6)


def test_renormalize_flag_off():
    b = init_bank([[1.0, 0.0]], renormalize=False)
    b.centroids = np.array([[1.0, 0.0]])
    momentum_update(b, [0.0, 1.0], 0, m=0.5)
    assert np.allclose(b.centroids[0], [0.5, 0.5])


# ---------------------------------------------------------------- schedule

def test_cosine_schedule_points():
    s = MomentumSchedule(0.5, 0.1, 100, "cosine")
    assert momentum_at(s, 0) == pytest.approx(0.5)
    assert momentum_at(s, 100) == pytest.approx(0.1)
    assert momentum_at(s, 50) == pytest.approx(0.3)
    vals = [momentum_at(s, t) for t in range(101)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_fixed_schedule_constant():
    s = MomentumSchedule.fixed(0.2)
    assert momentum_at(s, 0) == momentum_at(s, 10**6) == 0.2


def test_schedule_clamp_warns(caplog):
    s = MomentumSchedule(0.5, 0.1, 10, "cosine")
    with caplog.at_level(logging.WARNING):
        assert momentum_at(s, 11) == 0.1
    assert "clamping" in caplog.text


@pytest.mark.parametrize("kw", [dict(m_max=0.1, m_min=0.5), dict(T=0), dict(mode="step"),
                                dict(m_max=1.5)])
def test_schedule_validation(kw):
    base = dict(m_max=0.5, m_min=0.1, T=10, mode="cosine")
    base.update(kw)
    with pytest.raises(BankError):
        MomentumSchedule(**base)
