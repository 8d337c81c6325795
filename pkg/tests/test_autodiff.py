import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmcl import autodiff as ad
from mmcl.autodiff import AdamState, ParameterRegistry, Tensor
from mmcl.errors import ContractError, DegenerateVectorError, EmptyAxisError, ShapeError
from oracles import central_diff, max_rel_err


def grad_of(fn, x):
    t = Tensor(x, requires_grad=True)
    ad.backward(fn(t))
    return t.grad


def test_matmul_identity_and_hand_cases():
    out = ad.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[2, 3], [4, 5]]))
    np.testing.assert_array_equal(out.data, [[2, 3], [4, 5]])
    np.testing.assert_array_equal(ad.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data, [[11]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_is_ones_times_b_transpose():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))
    analytic = grad_of(lambda t: (t @ Tensor(b)).sum(), a)
    numeric = central_diff(lambda x: (x @ b).sum(), a)
    np.testing.assert_allclose(analytic, np.ones((3, 2)) @ b.T, rtol=0, atol=1e-14)
    assert max_rel_err(analytic, numeric) < 1e-8


def test_relu_and_tanh_values():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert ad.tanh(Tensor([0.0])).data[0] == 0.0


def test_relu_gradient_at_zero_is_zero():
    g = grad_of(lambda t: ad.relu(t).sum(), np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])


def test_tanh_derivative_at_zero():
    g = grad_of(lambda t: ad.tanh(t).sum(), np.array([0.0]))
    numeric = central_diff(lambda x: np.tanh(x).sum(), np.array([0.0]))
    assert g[0] == 1.0
    assert abs(numeric[0] - 1.0) < 1e-9


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_elementwise_binary_shape_mismatch(op):
    with pytest.raises(ShapeError):
        ad.elementwise(op, Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_elementwise_dispatch():
    a, b = Tensor([1.0, -2.0]), Tensor([3.0, 4.0])
    np.testing.assert_array_equal(ad.elementwise("add", a, b).data, [4, 2])
    np.testing.assert_array_equal(ad.elementwise("sub", a, b).data, [-2, -6])
    np.testing.assert_array_equal(ad.elementwise("mul", a, b).data, [3, -8])
    np.testing.assert_array_equal(ad.elementwise("relu", a).data, [1, 0])
    with pytest.raises(ContractError):
        ad.elementwise("cube", a)


def test_softmax_cases():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-16)
    big = ad.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big))
    assert big[0] == 1.0 and big[1] == 0.0
    np.testing.assert_allclose(ad.softmax(Tensor(np.log([1.0, 2.0, 3.0]))).data,
                               [1 / 6, 2 / 6, 3 / 6], rtol=1e-14)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e6, 1e6)))
def test_softmax_sums_to_one(x):
    out = ad.softmax(Tensor(x)).data
    assert np.all(np.isfinite(out)) and np.all(out >= 0)
    assert abs(out.sum() - 1.0) < 1e-12


def test_mean_over_axis():
    np.testing.assert_array_equal(ad.mean_over_axis(Tensor([[1.0, 3.0], [5.0, 7.0]]), 0).data, [3, 5])
    np.testing.assert_array_equal(ad.mean_over_axis(Tensor([[1.0, 2.0]]), 0).data, [1, 2])
    with pytest.raises(EmptyAxisError):
        ad.mean_over_axis(Tensor(np.zeros((0, 3))), 0)


def test_mean_gradient_is_one_over_n():
    x = np.random.default_rng(1).uniform(-1, 1, (4, 3))
    g = grad_of(lambda t: ad.mean_over_axis(t, 0).sum(), x)
    np.testing.assert_allclose(g, np.full((4, 3), 0.25), rtol=0, atol=1e-15)
    assert max_rel_err(g, central_diff(lambda a: a.mean(axis=0).sum(), x)) < 1e-8


def test_cosine_sim_cases():
    u = Tensor([0.3, -1.2, 2.0])
    assert abs(ad.cosine_sim(u, u).item() - 1.0) < 1e-15
    assert ad.cosine_sim(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0
    assert abs(ad.cosine_sim(Tensor([1.0, 1.0]), Tensor([1.0, 0.0])).item() - 1 / math.sqrt(2)) < 1e-15
    with pytest.raises(DegenerateVectorError):
        ad.cosine_sim(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        ad.backward(Tensor(np.ones(2), requires_grad=True) * 2.0)


def test_backward_sum_gives_ones_and_unreachable_zero():
    reg = ParameterRegistry()
    p = reg.add("p", np.arange(6.0).reshape(2, 3))
    q = reg.add("q", np.ones(2))
    reg.zero_grad()
    ad.backward(p.sum())
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))
    np.testing.assert_array_equal(q.grad, np.zeros(2))


def _composite(ops, x, w):
    """A chain over every differentiable op; ``ops`` is numpy or autodiff."""
    h = ops.relu(x @ w)
    m = ops.tanh(h + ops.mean(h, axis=0, keepdims=True))
    s = ops.softmax(m * h, axis=-1)
    return ops.sum(s * ops.exp(-h) + ops.log_softmax(h - m, axis=0))


class _NP:
    relu = staticmethod(lambda a: np.maximum(a, 0))
    tanh = staticmethod(np.tanh)
    exp = staticmethod(np.exp)
    mean = staticmethod(np.mean)
    sum = staticmethod(np.sum)

    @staticmethod
    def softmax(a, axis):
        e = np.exp(a - a.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)

    @staticmethod
    def log_softmax(a, axis):
        s = a - a.max(axis=axis, keepdims=True)
        return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


class _AD:
    relu = staticmethod(ad.relu)
    tanh = staticmethod(ad.tanh)
    exp = staticmethod(ad.exp)
    mean = staticmethod(ad.mean)
    sum = staticmethod(ad.sum_)
    softmax = staticmethod(ad.softmax)
    log_softmax = staticmethod(ad.log_softmax)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gradient_fidelity_random_composites(seed):
    rng = np.random.default_rng(seed)
    x, w = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 5))
    wt = Tensor(w, requires_grad=True)
    ad.backward(_composite(_AD, Tensor(x), wt))
    numeric = central_diff(lambda a: _composite(_NP, x, a), w)
    assert max_rel_err(wt.grad, numeric) < 1e-4


def test_structural_ops_gradients():
    rng = np.random.default_rng(3)
    a = rng.uniform(-1, 1, (2, 3))

    def f_ad(t):
        stacked = ad.stack([t, t * 2.0], axis=0)
        cat = ad.concat([stacked[0], stacked[1][:, :2]], axis=1)
        return (ad.transpose(cat.reshape(1, 2, 5).T, (1, 0, 2)) ** 2).sum() + ad.softplus(t).sum() \
            + ad.sigmoid(t)[np.array([0, 0, 1])].sum()

    def f_np(x):
        stacked = np.stack([x, x * 2.0])
        cat = np.concatenate([stacked[0], stacked[1][:, :2]], axis=1)
        sig = 1 / (1 + np.exp(-x))
        return (cat ** 2).sum() + np.log1p(np.exp(x)).sum() + sig[[0, 0, 1]].sum()

    assert abs(f_ad(Tensor(a)).item() - f_np(a)) < 1e-12
    assert max_rel_err(grad_of(f_ad, a), central_diff(f_np, a)) < 1e-8


def test_no_grad_builds_no_graph():
    p = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = (p * 2.0).sum()
    assert not out.requires_grad


# ------------------------------------------------------------------- optimizer


def test_adam_zero_gradient_leaves_parameters():
    reg = ParameterRegistry()
    p = reg.add("p", [1.0, -2.0])
    reg.zero_grad()
    ad.adam_step(reg, AdamState(base_lr=0.1))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_skips_frozen_parameter():
    reg = ParameterRegistry()
    p = reg.add("p", [1.0, 2.0], trainable=False)
    q = reg.add("q", [1.0])
    reg.zero_grad()
    p.grad = np.ones(2)
    q.grad = np.ones(1)
    before = p.data.tobytes()
    ad.adam_step(reg, AdamState(base_lr=0.1))
    assert p.data.tobytes() == before
    assert q.data[0] != 1.0


def test_adam_single_step_hand_value():
    reg = ParameterRegistry()
    p = reg.add("p", [1.0])
    p.grad = np.array([1.0])
    ad.adam_step(reg, AdamState(base_lr=0.1), lr=0.1)
    # m_hat = v_hat = 1 after bias correction -> p - 0.1 * 1 / (1 + eps)
    assert abs(p.data[0] - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-15
    assert abs(p.data[0] - 0.9) < 1e-8


def test_adam_missing_gradient():
    reg = ParameterRegistry()
    reg.add("p", [1.0])
    with pytest.raises(ContractError):
        ad.adam_step(reg, AdamState())


def test_registry_rejects_duplicates_and_tracks_trainable():
    reg = ParameterRegistry()
    reg.add("a", [1.0])
    with pytest.raises(ContractError):
        reg.add("a", [2.0])
    reg.set_trainable("a", False)
    assert not reg["a"].requires_grad
    reg.set_trainable("a", True)
    assert reg["a"].requires_grad


def test_cosine_lr_points():
    assert ad.cosine_lr(0, 100, 1e-4) == 1e-4
    assert ad.cosine_lr(100, 100, 1e-4) == 0.0
    assert abs(ad.cosine_lr(50, 100, 1e-4) - 0.5e-4) < 1e-20
    with pytest.raises(ContractError):
        ad.cosine_lr(101, 100, 1e-4)
    with pytest.raises(ContractError):
        ad.cosine_lr(0, 0, 1e-4)


def test_cosine_lr_monotone():
    values = [ad.cosine_lr(s, 37, 1.0) for s in range(38)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(5)
        x, w = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 5))
        wt = Tensor(w, requires_grad=True)
        out = _composite(_AD, Tensor(x), wt)
        ad.backward(out)
        return out.data.tobytes() + wt.grad.tobytes()

    assert run() == run()
