from __future__ import annotations

import numpy as np
import pytest

from nscmerge import autograd as ag
from nscmerge.autograd import Tensor
from nscmerge.optim import AdamW


def _fd_check(fn, *arrays, eps=1e-6, tol=1e-6):
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    weights = np.random.default_rng(0).normal(size=out.shape)
    ag.reduce_sum(out * Tensor(weights)).backward()
    for leaf, base in zip(leaves, arrays):
        num = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += eps
            minus[idx] -= eps
            args_p = [Tensor(plus if b is base else b) for b in arrays]
            args_m = [Tensor(minus if b is base else b) for b in arrays]
            num[idx] = (np.sum(fn(*args_p).data * weights) - np.sum(fn(*args_m).data * weights)) / (2 * eps)
        np.testing.assert_allclose(leaf.grad, num, rtol=tol, atol=tol)


g = np.random.default_rng(1)
X = g.normal(size=(3, 4))
Y = g.normal(size=(3, 4))
W = g.normal(size=(4, 2))
B3 = g.normal(size=(2, 3, 4))

CASES = {
    "add_broadcast": (lambda x, b: x + b, X, g.normal(size=(4,))),
    "sub": (lambda x, y: x - y, X, Y),
    "mul_broadcast": (lambda x, b: x * b, X, g.normal(size=(3, 1))),
    "div": (lambda x, y: x / (y * y + 1.0), X, Y),
    "matmul": (lambda x, w: x @ w, X, W),
    "batched_matmul": (lambda x, y: x @ y.T, B3, g.normal(size=(2, 3, 4))),
    "sum_axis": (lambda x: ag.reduce_sum(x, axis=0), X),
    "mean_keepdims": (lambda x: ag.mean(x, axis=-1, keepdims=True), B3),
    "reshape_transpose": (lambda x: ag.transpose(ag.reshape(x, (2, 6)), (1, 0)), X),
    "getitem_repeat": (lambda x: x[np.array([0, 2, 0])], X),
    "stack": (lambda x, y: ag.stack([x, y * 2.0], axis=1), X, Y),
    "exp_log": (lambda x: ag.log(ag.exp(x) + 1.0), X),
    "tanh": (lambda x: ag.tanh(x), X),
    "gelu": (lambda x: ag.gelu(x), X),
    "softmax": (lambda x: ag.softmax(x), B3),
    "log_softmax": (lambda x: ag.log_softmax(x, axis=0), X),
    "layer_norm": (lambda x: ag.layer_norm(x), B3),
    "clamped_sqrt": (lambda x: ag.clamped_sqrt(x * x + 0.1), X),
}


@pytest.mark.parametrize("name", list(CASES))
def test_gradients_match_finite_differences(name):
    fn, *arrays = CASES[name]
    _fd_check(fn, *arrays)


def test_clamped_sqrt_zero_gradient_when_clamped():
    x = Tensor(np.array([-1.0, 0.0, 4.0]), requires_grad=True)
    y = ag.clamped_sqrt(x)
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])
    ag.reduce_sum(y).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 0.25])


def test_shared_subexpression_accumulates():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = x * x
    (y + y).backward()
    assert float(x.grad) == pytest.approx(12.0)


def test_gelu_matches_reference_values():
    from math import erf, sqrt

    xs = np.array([-2.0, -0.5, 0.0, 1.0, 3.0])
    expected = [v * 0.5 * (1 + erf(v / sqrt(2))) for v in xs]
    np.testing.assert_allclose(ag.gelu(Tensor(xs)).data, expected, rtol=1e-14)


def test_layer_norm_output_statistics():
    out = ag.layer_norm(Tensor(np.random.default_rng(3).normal(3.0, 5.0, size=(4, 32)))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-5)


def test_deep_chain_does_not_recurse():
    x = Tensor(np.array(1.0), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.backward()
    assert float(x.grad) == 1.0


def test_adamw_matches_hand_computation():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    grads = [np.array([0.5, -1.0]), np.array([0.2, 0.3])]
    m = np.zeros(2)
    v = np.zeros(2)
    expected = p.data.copy()
    for t, gr in enumerate(grads, 1):
        p.grad = gr
        opt.step()
        m = 0.9 * m + 0.1 * gr
        v = 0.999 * v + 0.001 * gr * gr
        upd = (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8) + 0.01 * expected
        expected = expected - 0.1 * upd
    np.testing.assert_allclose(p.data, expected, rtol=1e-14)


def test_adamw_first_step_is_signed_lr():
    p = Tensor(np.array([0.0, 0.0, 5.0]), requires_grad=True)
    opt = AdamW([p], lr=0.01)
    p.grad = np.array([3.0, -1e-3, 0.0])
    opt.step()
    np.testing.assert_allclose(p.data, [-0.01, 0.01, 5.0], atol=1e-7)


def test_adamw_rejects_negative_lr():
    with pytest.raises(ValueError):
        AdamW([], lr=-1.0)
