"""Tensor engine: forward oracles, backward rules, SGD, finite differences."""

import math

import numpy as np
import pytest

from scenecount import autodiff as ad
from scenecount.autodiff import SGD, Tensor, backward, finite_diff_check
from scenecount.errors import ConfigError, DimensionError, StateError


def t64(data, grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad,
                  dtype=np.float64)


# ---------------------------------------------------------------------------
# brute-force oracles, kept dumb on purpose
# ---------------------------------------------------------------------------

def conv2d_loops(x, w, b, stride=1, padding=0, dilation=1):
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.zeros((c_in, h + 2 * padding, wd + 2 * padding))
    xp[:, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(c_in):
                    for a in range(kh):
                        for bb in range(kw):
                            acc += (xp[c, i * stride + a * dilation,
                                       j * stride + bb * dilation]
                                    * w[o, c, a, bb])
                out[o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


def max_pool_loops(x, k):
    c, h, w = x.shape
    out = np.zeros((c, h // k, w // k))
    for ch in range(c):
        for i in range(h // k):
            for j in range(w // k):
                out[ch, i, j] = x[ch, i * k:(i + 1) * k, j * k:(j + 1) * k].max()
    return out


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv2d_ones_kernel():
    x = t64(np.ones((1, 3, 3)), grad=False)
    w = t64(np.ones((1, 1, 2, 2)), grad=False)
    b = t64(np.zeros(1), grad=False)
    out = ad.conv2d(x, w, b)
    assert out.shape == (1, 2, 2)
    assert np.array_equal(out.data, np.full((1, 2, 2), 4.0))


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = t64(rng.standard_normal((3, 5, 4)), grad=False)
    w = t64(np.ones((3, 3, 1, 1)) * np.eye(3)[:, :, None, None], grad=False)
    out = ad.conv2d(x, w)
    assert np.allclose(out.data, x.data)


def test_conv2d_dilation_matches_bruteforce():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 5, 5))
    w = rng.standard_normal((1, 1, 3, 3))
    out = ad.conv2d(t64(x, grad=False), t64(w, grad=False), dilation=2)
    assert out.shape == (1, 1, 1)
    expect = conv2d_loops(x, w, None, dilation=2)
    assert np.allclose(out.data, expect)


@pytest.mark.parametrize("stride,padding,dilation", [(1, 0, 1), (2, 1, 1), (1, 2, 2)])
def test_conv2d_matches_bruteforce(stride, padding, dilation):
    rng = np.random.default_rng(stride * 100 + padding * 10 + dilation)
    x = rng.standard_normal((2, 8, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = ad.conv2d(t64(x, grad=False), t64(w, grad=False), t64(b, grad=False),
                    stride=stride, padding=padding, dilation=dilation)
    expect = conv2d_loops(x, w, b, stride, padding, dilation)
    assert out.shape == expect.shape
    assert np.allclose(out.data, expect, atol=1e-12)


def test_conv2d_channel_mismatch():
    x = t64(np.ones((2, 4, 4)), grad=False)
    w = t64(np.ones((1, 3, 3, 3)), grad=False)
    with pytest.raises(DimensionError):
        ad.conv2d(x, w)


# ---------------------------------------------------------------------------
# conv_transpose2d
# ---------------------------------------------------------------------------

def test_conv_transpose_single_pixel():
    x = t64(np.ones((1, 1, 1)), grad=False)
    w = t64(np.ones((1, 1, 2, 2)), grad=False)
    out = ad.conv_transpose2d(x, w, stride=2)
    assert np.array_equal(out.data, np.ones((1, 2, 2)))


def test_conv_transpose_no_overlap_at_stride_equals_kernel():
    x = t64(np.ones((1, 2, 2)), grad=False)
    w = t64(np.ones((1, 1, 2, 2)), grad=False)
    out = ad.conv_transpose2d(x, w, stride=2)
    assert np.array_equal(out.data, np.ones((1, 4, 4)))


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv_transpose_adjoint_identity(stride):
    # <conv2d(x, w), y> == <x, conv_transpose2d(y, w)> where the same weight
    # array is reinterpreted from [C_out,C_in,kh,kw] to [C_in,C_out,kh,kw]
    rng = np.random.default_rng(stride)
    x = rng.standard_normal((2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    fwd = ad.conv2d(t64(x, grad=False), t64(w, grad=False), stride=stride)
    y = rng.standard_normal(fwd.shape)
    back = ad.conv_transpose2d(t64(y, grad=False), t64(w, grad=False),
                               stride=stride).data
    # the adjoint output can be smaller than x when stride skips trailing
    # rows; those rows contribute nothing to the forward inner product
    m = back.shape[1]
    lhs = float((fwd.data * y).sum())
    rhs = float((x[:, :m, :m] * back).sum())
    assert abs(lhs - rhs) <= 1e-6 * max(abs(lhs), abs(rhs))


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def test_max_pool_basic():
    x = t64([[[1.0, 2.0], [3.0, 4.0]]], grad=False)
    out = ad.max_pool2d(x, 2)
    assert out.data.reshape(-1).tolist() == [4.0]


def test_max_pool_matches_bruteforce():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 6, 4))
    out = ad.max_pool2d(t64(x, grad=False), 2)
    assert np.array_equal(out.data, max_pool_loops(x, 2))


def test_max_pool_tie_routes_to_first_in_scan_order():
    x = t64(np.zeros((1, 2, 2)))
    out = ad.max_pool2d(x, 2)
    backward(ad.tensor_sum(out))
    expect = np.zeros((1, 2, 2))
    expect[0, 0, 0] = 1.0  # first occurrence wins
    assert np.array_equal(x.grad, expect)


def test_max_pool_gradient_one_hot_per_window():
    rng = np.random.default_rng(6)
    x = t64(rng.standard_normal((2, 8, 8)))
    backward(ad.tensor_sum(ad.max_pool2d(x, 2)))
    per_window = x.grad.reshape(2, 4, 2, 4, 2).transpose(0, 1, 3, 2, 4).reshape(2, 4, 4, 4)
    assert np.array_equal((per_window != 0).sum(axis=3), np.ones((2, 4, 4)))


def test_max_pool_indivisible_extent():
    with pytest.raises(DimensionError):
        ad.max_pool2d(t64(np.zeros((1, 5, 4)), grad=False), 2)


def test_global_avg_pool():
    x = t64([[[1.0, 2.0], [3.0, 4.0]]], grad=False)
    assert ad.global_avg_pool(x).data.tolist() == [2.5]
    rng = np.random.default_rng(7)
    y = rng.standard_normal((3, 4, 4))
    a = ad.global_avg_pool(t64(3.0 * y, grad=False)).data
    b = 3.0 * ad.global_avg_pool(t64(y, grad=False)).data
    assert np.allclose(a, b)


# ---------------------------------------------------------------------------
# affine and pointwise
# ---------------------------------------------------------------------------

def test_affine_oracle():
    out = ad.affine(t64([1.0, 1.0], grad=False), t64([[1.0, 2.0]], grad=False),
                    t64([3.0], grad=False))
    assert out.data.tolist() == [6.0]


def test_affine_weight_gradient_is_outer_product():
    rng = np.random.default_rng(8)
    x = t64(rng.standard_normal(5), grad=False)
    w = t64(rng.standard_normal((3, 5)))
    b = t64(rng.standard_normal(3), grad=False)
    out = ad.affine(x, w, b)
    probe = rng.standard_normal(3)
    backward(ad.tensor_sum(ad.mul(out, t64(probe, grad=False))))
    assert np.allclose(w.grad, np.outer(probe, x.data))


def test_pointwise_values():
    assert ad.sigmoid(t64([0.0], grad=False)).data.tolist() == [0.5]
    assert math.isclose(ad.arctan(t64([1.0], grad=False)).item(), math.pi / 4,
                        rel_tol=1e-12)


def test_relu_gradient_convention():
    x = t64([-2.0, 0.0, 3.0])
    backward(ad.tensor_sum(ad.relu(x)))
    assert x.grad.tolist() == [0.0, 0.0, 1.0]  # 0 at exactly 0


def test_sigmoid_saturation_is_finite():
    out = ad.sigmoid(Tensor(np.array([-1000.0, 1000.0], dtype=np.float32),
                            requires_grad=False))
    assert np.isfinite(out.data).all()
    assert out.data[0] == 0.0 and out.data[1] == 1.0


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def test_mse_density_loss_oracle():
    pred = [t64(np.zeros((1, 2, 2)), grad=False)]
    gt = [t64(np.ones((1, 2, 2)), grad=False)]
    assert ad.mse_density_loss(pred, gt).item() == 2.0


def test_mse_density_loss_zero_and_quadratic():
    rng = np.random.default_rng(9)
    a = rng.standard_normal((1, 3, 3))
    g = rng.standard_normal((1, 3, 3))
    same = ad.mse_density_loss([t64(a, grad=False)], [t64(a, grad=False)]).item()
    assert same == 0.0
    l1 = ad.mse_density_loss([t64(g + (a - g), grad=False)], [t64(g, grad=False)]).item()
    l2 = ad.mse_density_loss([t64(g + 2 * (a - g), grad=False)], [t64(g, grad=False)]).item()
    assert math.isclose(l2, 4.0 * l1, rel_tol=1e-12)


def test_mse_density_loss_empty_batch():
    with pytest.raises(ConfigError):
        ad.mse_density_loss([], [])


def test_mse_density_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.mse_density_loss([t64(np.zeros((1, 2, 2)), grad=False)],
                            [t64(np.zeros((1, 3, 2)), grad=False)])


# ---------------------------------------------------------------------------
# backward mechanics
# ---------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = t64(np.arange(6.0).reshape(2, 3))
    backward(ad.tensor_sum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_sum_of_squares():
    x = t64([1.0, -2.0, 3.0])
    backward(ad.tensor_sum(ad.mul(x, x)))
    assert np.allclose(x.grad, 2.0 * x.data)


def test_backward_fanout_accumulates():
    # x feeds two consumers; grads must add
    x = t64([1.5])
    y = ad.add(ad.scale(x, 2.0), ad.scale(x, 3.0))
    backward(ad.tensor_sum(y))
    assert x.grad.tolist() == [5.0]


def test_backward_rejects_non_scalar():
    x = t64(np.zeros((2, 2)))
    with pytest.raises(ConfigError):
        backward(ad.add(x, x))


def test_backward_rejects_unconnected_loss():
    with pytest.raises(StateError):
        backward(Tensor(np.array(1.0)))


def test_weighted_sum_gradients():
    a = t64([2.0, 4.0])
    b = t64([1.0, 1.0])
    w = t64([0.25])
    backward(ad.tensor_sum(ad.weighted_sum(a, b, w)))
    assert np.allclose(a.grad, [0.25, 0.25])
    assert np.allclose(b.grad, [0.75, 0.75])
    assert np.allclose(w.grad, [(2.0 - 1.0) + (4.0 - 1.0)])


def test_add_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.add(t64(np.zeros(2), grad=False), t64(np.zeros(3), grad=False))


def test_ops_are_deterministic():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    a = ad.conv2d(t64(x, grad=False), t64(w, grad=False), padding=1).data
    b = ad.conv2d(t64(x, grad=False), t64(w, grad=False), padding=1).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# SGD
# ---------------------------------------------------------------------------

def test_sgd_single_step_no_momentum():
    p = t64([1.0])
    p.grad[:] = 1.0
    SGD([p], lr=0.1, momentum=0.0).step()
    assert np.allclose(p.data, [0.9])
    assert p.grad.tolist() == [0.0]  # zeroed after the step


def test_sgd_two_steps_with_momentum():
    p = t64([0.0])
    opt = SGD([p], lr=0.1, momentum=0.9)
    for _ in range(2):
        p.grad[:] = 1.0
        opt.step()
    # v1=1 -> p=-0.1; v2=1.9 -> p=-0.29
    assert np.allclose(p.data, [-0.29])


def test_sgd_zero_gradient_leaves_params():
    p = t64([1.25])
    SGD([p], lr=0.5, momentum=0.9).step()
    assert p.data.tolist() == [1.25]


def test_sgd_validation():
    p = t64([0.0])
    with pytest.raises(ConfigError):
        SGD([p], lr=0.0)
    with pytest.raises(ConfigError):
        SGD([p], lr=0.1, momentum=1.0)
    q = Tensor(np.zeros(1))  # no grad buffer
    with pytest.raises(StateError):
        SGD([q], lr=0.1).step()


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def test_finite_diff_sum_of_squares():
    x = t64([1.0, 2.0])
    err = finite_diff_check(lambda v: ad.tensor_sum(ad.mul(v, v)), x, h=1e-5)
    assert err < 1e-8


def test_finite_diff_constant_function():
    x = t64([3.0])
    c = t64([7.0], grad=False)
    err = finite_diff_check(lambda v: ad.tensor_sum(ad.mul(ad.scale(v, 0.0), c)), x)
    assert err == 0.0
