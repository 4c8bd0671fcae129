import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from prerank.losses import (
    BatchTooSmall,
    DomainError,
    LossWeights,
    composite_loss,
    engagement_loss,
    engagement_loss_t,
    sampled_softmax_loss,
    sampled_softmax_loss_t,
)


def scalar_bce(p, u, w):
    total = 0.0
    for pi, ui, wi in zip(p, u, w):
        total += -wi * (ui * math.log(pi) + (1 - ui) * math.log(1 - pi))
    return total / len(p)


def scalar_softmax_loss(q, e, u, log_q):
    b = len(q)
    total = 0.0
    for i in range(b):
        logits = [sum(q[i][k] * e[j][k] for k in range(len(q[i]))) - log_q[j] for j in range(b)]
        m = max(logits)
        lse = m + math.log(sum(math.exp(x - m) for x in logits))
        total += -u[i] * (logits[i] - lse)
    return total / b


def test_engagement_examples():
    assert engagement_loss([0.5], [1], [1])[0] == pytest.approx(math.log(2), abs=1e-12)
    assert engagement_loss([1 - 1e-12, 1e-12], [1, 0])[0] < 1e-10
    with pytest.raises(DomainError):
        engagement_loss([1.0], [1])


def test_engagement_matches_scalar_oracle_and_fd(rng):
    for _ in range(20):
        p, u, w = rng.uniform(0.05, 0.95, 4), rng.integers(0, 2, 4), rng.uniform(0.5, 2, 4)
        loss, grad = engagement_loss(p, u, w)
        assert abs(loss - scalar_bce(p, u, w)) <= 1e-9
        h = 1e-6
        for k in range(4):
            up, dn = p.copy(), p.copy()
            up[k] += h
            dn[k] -= h
            num = (scalar_bce(up, u, w) - scalar_bce(dn, u, w)) / (2 * h)
            assert abs(grad[k] - num) <= 1e-6 * max(abs(num), 1e-12) + 1e-10


def test_engagement_decomposes_over_batches(rng):
    p, u, w = rng.uniform(0.05, 0.95, 10), rng.integers(0, 2, 10), rng.uniform(0.5, 2, 10)
    whole = engagement_loss(p, u, w)[0]
    a, b = engagement_loss(p[:3], u[:3], w[:3])[0], engagement_loss(p[3:], u[3:], w[3:])[0]
    assert whole == pytest.approx((3 * a + 7 * b) / 10, abs=1e-12)


def test_engagement_torch_matches_numpy(rng):
    raw = rng.normal(size=8)
    u, w = rng.integers(0, 2, 8).astype(float), rng.uniform(0.5, 2, 8)
    p = 1 / (1 + np.exp(-raw))
    t = engagement_loss_t(torch.tensor(raw), torch.tensor(u), torch.tensor(w)).item()
    assert t == pytest.approx(engagement_loss(p, u, w)[0], abs=1e-12)


def test_softmax_all_negative_is_zero():
    loss, dq, de = sampled_softmax_loss(np.ones((2, 3)), np.ones((2, 3)), [0, 0], [0, 0])
    assert loss == 0 and not dq.any() and not de.any()


def test_softmax_symmetric_case():
    loss, _, _ = sampled_softmax_loss(np.ones((2, 3)), np.ones((2, 3)), [1, 1], np.log([0.5, 0.5]))
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_softmax_hand_set_batch():
    q = np.array([[1.0, 0.5], [-0.3, 0.8], [0.2, -1.0]])
    e = np.array([[0.4, 0.1], [0.9, -0.2], [-0.5, 0.7]])
    u = np.array([1.0, 0.0, 1.0])
    log_q = np.log([0.5, 0.25, 0.25])
    loss, dq, de = sampled_softmax_loss(q, e, u, log_q)
    assert abs(loss - scalar_softmax_loss(q, e, u, log_q)) <= 1e-9
    h = 1e-6
    for mat, grad in ((q, dq), (e, de)):
        for idx in np.ndindex(mat.shape):
            orig = mat[idx]
            mat[idx] = orig + h
            up = scalar_softmax_loss(q, e, u, log_q)
            mat[idx] = orig - h
            dn = scalar_softmax_loss(q, e, u, log_q)
            mat[idx] = orig
            num = (up - dn) / (2 * h)
            assert abs(grad[idx] - num) <= 1e-5 * max(abs(num), abs(grad[idx])) + 1e-10


def test_softmax_too_small():
    with pytest.raises(BatchTooSmall):
        sampled_softmax_loss(np.ones((1, 2)), np.ones((1, 2)), [1], [0])


@settings(max_examples=40, deadline=None)
@given(b=st.integers(2, 6), shift=st.floats(-50, 50), seed=st.integers(0, 10_000))
def test_softmax_shift_invariance_and_torch_agreement(b, shift, seed):
    rng = np.random.default_rng(seed)
    q, e = rng.normal(size=(b, 4)), rng.normal(size=(b, 4))
    u = rng.integers(0, 2, b).astype(float)
    log_q = np.log(rng.uniform(0.01, 1, b))
    base = sampled_softmax_loss(q, e, u, log_q)[0]
    assert abs(sampled_softmax_loss(q, e, u, log_q + shift)[0] - base) <= 1e-6
    t = sampled_softmax_loss_t(torch.tensor(q), torch.tensor(e), torch.tensor(u), torch.tensor(log_q)).item()
    assert abs(t - base) <= 1e-9
    logits = q @ e.T - log_q[None, :]
    probs = np.exp(logits - logits.max(1, keepdims=True))
    probs /= probs.sum(1, keepdims=True)
    np.testing.assert_allclose(probs.sum(1), 1.0, atol=1e-6)


def test_composite():
    assert composite_loss(1.0, 2.0, LossWeights(1.0, 0.01)) == pytest.approx(1.02)
    assert composite_loss(0.7, 5.0, LossWeights(1.0, 0.0)) == 0.7
    assert LossWeights() == LossWeights(1.0, 0.01)
