import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from glare.errors import DimensionError, NumericError
from glare.numerics import (AdamState, Mlp2Params, adam_step, as_matrix, finite_diff_check,
                            mlp2_backward, mlp2_forward, mlp2_param_count, softmax,
                            softmax_cross_entropy, softmax_cross_entropy_batch)


def random_mlp(rng, d_in, hidden, d_out):
    return Mlp2Params(rng.normal(size=(hidden, d_in)), rng.normal(size=hidden),
                      rng.normal(size=(d_out, hidden)), rng.normal(size=d_out))


def test_mlp_forward_matches_per_row_loop():
    # [DERIVED] oracle: explicit scalar loops
    rng = np.random.default_rng(0)
    p = random_mlp(rng, 4, 5, 3)
    X = rng.normal(size=(6, 4))
    Y, _ = mlp2_forward(p, X)
    for r in range(6):
        h = [max(0.0, sum(p.W1[j, i] * X[r, i] for i in range(4)) + p.b1[j]) for j in range(5)]
        for o in range(3):
            expect = sum(p.W2[o, j] * h[j] for j in range(5)) + p.b2[o]
            assert Y[r, o] == pytest.approx(expect, abs=1e-12)


def test_mlp_shape_mismatch_is_dimension_error():
    p = Mlp2Params.zeros(4, 3, 2)
    with pytest.raises(DimensionError):
        mlp2_forward(p, np.zeros((2, 5)))
    with pytest.raises(DimensionError):
        Mlp2Params(np.zeros((3, 4)), np.zeros(2), np.zeros((2, 3)), np.zeros(2))


def test_mlp_param_count_by_hand():
    # [TRIVIAL] 3*4 + 3 + 2*3 + 2
    assert mlp2_param_count(4, 3, 2) == 23
    assert Mlp2Params.zeros(4, 3, 2).n_params == 23


def test_mlp_backward_against_finite_differences():
    rng = np.random.default_rng(1)
    p = random_mlp(rng, 3, 4, 2)
    X = rng.normal(size=(5, 3))
    G = rng.normal(size=(5, 2))
    shapes = [a.shape for a in (p.W1, p.b1, p.W2, p.b2)]
    sizes = [int(np.prod(s)) for s in shapes]

    def unpack(flat):
        parts, pos = [], 0
        for shp, n in zip(shapes, sizes):
            parts.append(flat[pos:pos + n].reshape(shp))
            pos += n
        return Mlp2Params(*parts)

    def loss_fn(flat):
        q = unpack(flat)
        Y, cache = mlp2_forward(q, X)
        g, _ = mlp2_backward(q, cache, G)
        return float(np.sum(Y * G)), np.concatenate([a.ravel() for a in (g.W1, g.b1, g.W2, g.b2)])

    flat = np.concatenate([a.ravel() for a in (p.W1, p.b1, p.W2, p.b2)])
    assert finite_diff_check(loss_fn, flat) < 1e-6


def test_mlp_input_gradient():
    rng = np.random.default_rng(2)
    p = random_mlp(rng, 3, 4, 2)
    G = rng.normal(size=(1, 2))
    x0 = rng.normal(size=3)

    def loss_fn(x):
        Y, cache = mlp2_forward(p, x[None, :])
        _, dX = mlp2_backward(p, cache, G)
        return float(np.sum(Y * G)), dX[0]

    assert finite_diff_check(loss_fn, x0) < 1e-6


def lse_oracle(z):
    with mpmath.workdps(50):
        return mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(v))) for v in z))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-700, 700)), st.data())
def test_cross_entropy_matches_high_precision(z, data):
    # [DERIVED] oracle: 50-digit log-sum-exp
    label = data.draw(st.integers(0, z.shape[0] - 1))
    loss, grad = softmax_cross_entropy(z, label)
    expect = float(lse_oracle(z) - mpmath.mpf(float(z[label])))
    assert loss == pytest.approx(expect, rel=1e-12, abs=1e-9)
    assert abs(grad.sum()) < 1e-12
    assert np.all(np.isfinite(grad))


def test_cross_entropy_uniform_logits():
    # [TRIVIAL] equal logits give log C
    loss, grad = softmax_cross_entropy(np.zeros(7), 3)
    assert loss == pytest.approx(math.log(7), abs=1e-15)
    assert grad[3] == pytest.approx(1 / 7 - 1)


def test_cross_entropy_errors():
    with pytest.raises(IndexError):
        softmax_cross_entropy(np.zeros(3), 3)
    with pytest.raises(NumericError):
        softmax_cross_entropy(np.array([0.0, np.nan]), 0)


def test_cross_entropy_batch_matches_rows():
    rng = np.random.default_rng(3)
    Z = rng.normal(size=(5, 4)) * 10
    y = np.array([0, 3, 1, 2, 3])
    losses, grads = softmax_cross_entropy_batch(Z, y)
    for i in range(5):
        l, g = softmax_cross_entropy(Z[i], int(y[i]))
        assert losses[i] == pytest.approx(l, abs=1e-13)
        np.testing.assert_allclose(grads[i], g, atol=1e-15)


def test_softmax_rows_sum_to_one():
    p = softmax(np.array([[1000.0, 0.0, -1000.0], [1.0, 2.0, 3.0]]))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-15)


def adam_oracle(theta, grads_seq, lr, b1=0.9, b2=0.999, eps=1e-8):
    # scalar re-implementation of the textbook update
    theta = list(theta)
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    for t, g in enumerate(grads_seq, start=1):
        for i in range(len(theta)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            theta[i] -= lr * mh / (math.sqrt(vh) + eps)
    return np.array(theta)


def test_adam_matches_scalar_oracle():
    # [DERIVED] oracle: scalar loop implementation
    rng = np.random.default_rng(4)
    theta = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(10)]
    state = AdamState.create(5, lr=1e-2)
    p = theta.copy()
    for g in grads:
        p = adam_step(state, p, g)
    np.testing.assert_allclose(p, adam_oracle(theta, grads, 1e-2), rtol=0, atol=1e-14)
    assert state.t == 10


def test_adam_first_step_moves_by_lr():
    # [TRIVIAL] bias correction makes the first step lr * sign(g) (up to eps)
    state = AdamState.create(3, lr=1e-3)
    p = adam_step(state, np.zeros(3), np.array([2.0, -0.5, 1e-3]))
    np.testing.assert_allclose(p, [-1e-3, 1e-3, -1e-3], rtol=1e-4)


def test_adam_zero_gradient_is_noop():
    state = AdamState.create(3)
    p0 = np.array([1.0, 2.0, 3.0])
    p1 = adam_step(state, p0, np.zeros(3))
    assert np.array_equal(p0, p1)
    assert state.t == 1


def test_adam_lr_zero_keeps_params_bitwise():
    state = AdamState.create(4, lr=0.0)
    p0 = np.random.default_rng(5).normal(size=4)
    p = p0
    for _ in range(5):
        p = adam_step(state, p, np.ones(4))
    assert p.tobytes() == p0.tobytes()


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step(AdamState.create(3), np.zeros(3), np.zeros(4))


def test_finite_diff_check_catches_wrong_gradient():
    bad = finite_diff_check(lambda p: (float(np.sum(p ** 2)), 3 * p), np.ones(3))
    good = finite_diff_check(lambda p: (float(np.sum(p ** 2)), 2 * p), np.ones(3))
    assert bad > 0.1
    assert good < 1e-8


def test_as_matrix_validation():
    with pytest.raises(DimensionError):
        as_matrix(np.zeros(3))
    with pytest.raises(NumericError):
        as_matrix([[np.inf]])
    assert as_matrix([[1, 2]], cols=2).dtype == np.float64
