import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oovtrack import autodiff as ad
from oovtrack.autodiff import Tensor
from gradcheck import OPS, check_op


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    for seed in range(5):
        assert check_op(name, seed) < 1e-6


def test_matmul_shape_and_identity(rng):
    a = rng.standard_normal((2, 3))
    assert (Tensor(a) @ Tensor(rng.standard_normal((3, 4)))).shape == (2, 4)
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(a)).data, a)


def test_matmul_shape_errors():
    with pytest.raises(ad.ShapeMismatch):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(ad.ShapeMismatch):
        ad.matmul(Tensor(np.zeros((2, 2, 3))), Tensor(np.zeros((3, 3, 2))))
    with pytest.raises(ad.ShapeMismatch):
        ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_maxpool_example():
    out = ad.maxpool1d(Tensor(np.array([1.0, 3.0, 2.0, 5.0]).reshape(1, 4, 1)))
    assert out.data.ravel().tolist() == [3.0, 5.0]
    with pytest.raises(ad.ShapeMismatch):
        ad.maxpool1d(Tensor(np.zeros((1, 3, 1))))


def naive_causal_conv(x, w, b):
    bsz, length, cin = x.shape
    k, _, cout = w.shape
    out = np.zeros((bsz, length, cout))
    for n in range(bsz):
        for t in range(length):
            for o in range(cout):
                acc = b[o]
                for j in range(k):
                    src = t - (k - 1) + j
                    if src < 0:
                        continue
                    for c in range(cin):
                        acc += x[n, src, c] * w[j, c, o]
                out[n, t, o] = acc
    return out


def test_conv1d_matches_nested_loops(rng):
    x = rng.standard_normal((2, 16, 4))
    w = rng.standard_normal((3, 4, 5))
    b = rng.standard_normal(5)
    ref = naive_causal_conv(x, w, b)
    np.testing.assert_allclose(ad.conv1d(Tensor(x), Tensor(w), Tensor(b)).data, ref, atol=1e-12)
    with ad.shape_stable():
        np.testing.assert_allclose(ad.conv1d(Tensor(x), Tensor(w), Tensor(b)).data, ref, atol=1e-12)


def test_conv1d_is_causal(rng):
    x = rng.standard_normal((1, 20, 3))
    w, b = Tensor(rng.standard_normal((3, 3, 2))), Tensor(rng.standard_normal(2))
    y = ad.conv1d(Tensor(x), w, b).data
    x2 = x.copy()
    x2[:, 12:, :] += 1.0
    y2 = ad.conv1d(Tensor(x2), w, b).data
    assert np.array_equal(y[:, :12], y2[:, :12])
    assert not np.allclose(y[:, 12:], y2[:, 12:])


def test_sum_of_squares_gradient():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    ad.backward((x * x).sum())
    assert x.grad.tolist() == [2.0, 4.0, 6.0]


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.NotScalar):
        ad.backward(x * 2.0)


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    ad.backward((y + y * x).sum())  # d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad[0] == pytest.approx(16.0)


def test_independent_graphs_are_bitwise_identical(rng):
    a = rng.standard_normal((4, 6))
    w = rng.standard_normal((6, 3))
    grads = []
    for _ in range(2):
        wt = Tensor(w.copy(), requires_grad=True)
        out = ad.softmax(ad.tanh(Tensor(a) @ wt), axis=-1)
        ad.backward(ad.layer_norm(out).sum() + (out * out).sum())
        grads.append(wt.grad)
    assert np.array_equal(grads[0], grads[1])


def test_constants_get_no_grad():
    c = Tensor(np.ones(3))
    x = Tensor(np.ones(3), requires_grad=True)
    ad.backward((c * x).sum())
    assert c.grad is None and x.grad is not None


def test_softmax_masked_rows(rng):
    scores = rng.standard_normal((4, 4)) + np.triu(np.full((4, 4), -np.inf), 1)
    out = ad.softmax(Tensor(scores), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-15)
    assert np.all(out[np.triu_indices(4, 1)] == 0.0)


def test_layer_norm_statistics(rng):
    out = ad.layer_norm(Tensor(rng.standard_normal((5, 32)) * 3 + 1)).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(1, 12), st.integers(1, 9), st.integers(0, 2**31))
def test_stable_matmul_rows_do_not_depend_on_height(n, k, m, seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal((n, k))
    b = r.standard_normal((k, m))
    with ad.shape_stable():
        full = ad.matmul(Tensor(a), Tensor(b)).data
        for rows in {1, max(1, n // 2), n}:
            assert np.array_equal(ad.matmul(Tensor(a[:rows]), Tensor(b)).data, full[:rows])
    np.testing.assert_allclose(full, a @ b, atol=1e-12)


def test_stable_mode_is_scoped():
    assert not getattr(ad._mode, "stable", False)
    with ad.shape_stable():
        assert ad._mode.stable
    assert not ad._mode.stable


def test_nan_propagates_through_relu_and_pool():
    x = Tensor(np.array([np.nan, -1.0, 2.0, np.nan]).reshape(1, 4, 1))
    assert np.isnan(ad.relu(x).data[0, 0, 0])
    assert np.isnan(ad.maxpool1d(x).data).all()
