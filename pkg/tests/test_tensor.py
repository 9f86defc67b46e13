import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctr.tensor import (NumericError, ShapeError, Tensor, conv2d, dropout, exp, log, matmul, relu,
                        safe_sqrt, softmax)
from conftest import fd_grad


def test_matmul_value():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_softmax_value():
    out = softmax(Tensor([[np.log(2.0), 0.0]]))
    assert np.allclose(out.data, [[2 / 3, 1 / 3]], atol=1e-15)


@given(arrays(np.float64, (3, 7), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(z):
    p = softmax(Tensor(z)).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        softmax(Tensor([[np.inf, 0.0]]))


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises((ValueError, ShapeError)):
        (x * 2.0).backward()


def _composite(params):
    W, b = params
    x = np.array([[0.3, -0.2, 0.5], [0.1, 0.4, -0.6]])
    h = relu(matmul(Tensor(x), W) + b)
    p = softmax(h * 1.5)
    return (log(p + 1e-3) * exp(p * 0.1)).sum() + safe_sqrt((h * h).sum())


def test_composite_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(20):
        W0, b0 = rng.normal(size=(3, 4)), rng.normal(size=4)
        W, b = Tensor(W0.copy(), True), Tensor(b0.copy(), True)
        _composite((W, b)).backward()

        def f_w(w):
            return _composite((Tensor(w), Tensor(b0))).item()

        def f_b(v):
            return _composite((Tensor(W0), Tensor(v))).item()

        gw, gb = fd_grad(f_w, W0.copy()), fd_grad(f_b, b0.copy())
        assert np.allclose(W.grad, gw, rtol=1e-4, atol=1e-7)
        assert np.allclose(b.grad, gb, rtol=1e-4, atol=1e-7)


def test_shared_node_accumulates():
    x = Tensor(3.0, requires_grad=True)
    y = x * x + x
    y.backward()
    assert x.grad == pytest.approx(7.0)


def test_safe_sqrt_zero_gradient_at_zero():
    x = Tensor(np.array([0.0, 4.0]), requires_grad=True)
    safe_sqrt(x).sum().backward()
    assert np.array_equal(x.grad, [0.0, 0.25])


def test_relu_gradient():
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    relu(x).sum().backward()
    assert np.array_equal(x.grad, [0.0, 1.0])


def test_dropout_inactive_paths():
    rng = np.random.default_rng(0)
    x = Tensor(np.ones((4, 5)))
    for rate, training in ((0.0, True), (0.5, False)):
        out, mask = dropout(x, rate, rng, training)
        assert out is x and mask is None
    with pytest.raises(ValueError):
        dropout(x, 1.0, rng)


def test_dropout_keeps_expectation():
    rng = np.random.default_rng(1)
    out, mask = dropout(Tensor(np.ones((200, 500))), 0.5, rng)
    assert set(np.unique(mask)) <= {0.0, 2.0}
    assert abs(out.data.mean() - 1.0) < 0.05


def test_conv2d_matches_naive_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 7, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2).data
    ref = np.zeros((2, 4, 3, 3))
    for n in range(2):
        for f in range(4):
            for i in range(3):
                for j in range(3):
                    ref[n, f, i, j] = (x[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[f]).sum() + b[f]
    assert np.allclose(out, ref, atol=1e-12)


def test_conv2d_gradients():
    rng = np.random.default_rng(3)
    x0, w0, b0 = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)
    x, w, b = Tensor(x0.copy(), True), Tensor(w0.copy(), True), Tensor(b0.copy(), True)
    (conv2d(x, w, b, 2) ** 2).sum().backward()
    gx = fd_grad(lambda v: (conv2d(Tensor(v), Tensor(w0), Tensor(b0), 2).data ** 2).sum(), x0.copy())
    gw = fd_grad(lambda v: (conv2d(Tensor(x0), Tensor(v), Tensor(b0), 2).data ** 2).sum(), w0.copy())
    assert np.allclose(x.grad, gx, rtol=1e-4, atol=1e-6)
    assert np.allclose(w.grad, gw, rtol=1e-4, atol=1e-6)
