import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from picanet import nn as N
from picanet.tensor import Graph, Tensor, backward, sum_all


def t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------- conv2d

def test_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 4, 5, 3))
    w = np.eye(3).reshape(1, 1, 3, 3)
    out = N.conv2d(t(x), t(w), t(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_all_ones_kernel_interior():
    c = 1.7
    out = N.conv2d(t(np.full((1, 5, 5, 1), c)), t(np.ones((3, 3, 1, 1))), padding=1)
    assert out.data[0, 2, 2, 0] == pytest.approx(9 * c, abs=1e-12)
    assert out.data[0, 0, 0, 0] == pytest.approx(4 * c, abs=1e-12)


def test_dilated_taps_on_one_hot():
    x = np.zeros((1, 5, 5, 1))
    x[0, 2, 2, 0] = 1
    w = np.arange(1.0, 10.0).reshape(3, 3, 1, 1)
    out = N.conv2d(t(x), t(w), dilation=2, padding=2).data[0, :, :, 0]
    ref = N.conv2d_reference(x, w, dilation=2, padding=2)[0, :, :, 0]
    np.testing.assert_allclose(out, ref, atol=1e-12)
    # the impulse lands at offsets {-2, 0, +2} only, kernel flipped
    nz = set(zip(*np.nonzero(out)))
    assert nz == {(y, x) for y in (0, 2, 4) for x in (0, 2, 4)}
    assert out[0, 0] == 9 and out[4, 4] == 1


@pytest.mark.parametrize("stride,dilation", list(itertools.product((1, 2), (1, 2, 3))))
def test_conv_matches_direct_loops(stride, dilation):
    rng = np.random.default_rng(10 * stride + dilation)
    for h, w in ((6, 6), (5, 6), (4, 3)):
        for k in (1, 2, 3):
            eff = (k - 1) * dilation + 1
            pad = eff // 2
            if h + 2 * pad < eff or w + 2 * pad < eff:
                continue
            x = rng.normal(size=(2, h, w, 3))
            wt = rng.normal(size=(k, k, 3, 4))
            b = rng.normal(size=4)
            got = N.conv2d(t(x), t(wt), t(b), stride, dilation, pad).data
            ref = N.conv2d_reference(x, wt, b, stride, dilation, pad)
            np.testing.assert_allclose(got, ref, atol=1e-10, rtol=0)


def test_conv_errors():
    with pytest.raises(ValueError):
        N.conv2d(t(np.ones((1, 4, 4, 2))), t(np.ones((3, 3, 3, 1))))
    with pytest.raises(ValueError):
        N.conv2d(t(np.ones((1, 2, 2, 1))), t(np.ones((5, 5, 1, 1))))


def test_conv_skips_input_grad_for_constant_input():
    x = t(np.ones((1, 4, 4, 2)))
    w = t(np.ones((3, 3, 2, 1)), grad=True)
    with Graph() as g:
        loss = sum_all(N.conv2d(x, w, padding=1))
    backward(g, loss)
    assert x.grad is None and w.grad.shape == (3, 3, 2, 1)


# ------------------------------------------------------------ upsampling

def test_upsample_constant():
    out = N.bilinear_upsample(t(np.full((1, 3, 4, 2), 0.7)), 9, 5)
    np.testing.assert_allclose(out.data, 0.7, atol=1e-15)


def test_upsample_single_pixel():
    out = N.bilinear_upsample(t(np.full((1, 1, 1, 1), 3.0)), 4, 6)
    np.testing.assert_array_equal(out.data, 3.0)


def test_upsample_corners_align():
    x = t(np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 2, 2, 1))
    out = N.bilinear_upsample(x, 4, 4).data[0, :, :, 0]
    assert (out[0, 0], out[0, 3], out[3, 0], out[3, 3]) == (0, 1, 2, 3)
    # align-corners: row 1 sits a third of the way down
    np.testing.assert_allclose(out[1, 0], 2 / 3, atol=1e-15)


def test_upsample_bad_size():
    with pytest.raises(ValueError):
        N.bilinear_upsample(t(np.ones((1, 2, 2, 1))), 0, 3)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 6), w=st.integers(1, 6), oh=st.integers(1, 9), ow=st.integers(1, 9))
def test_interp_rows_are_convex(h, w, oh, ow):
    m = N.interp_matrix(h, oh)
    assert np.all(m >= 0)
    np.testing.assert_allclose(m.sum(axis=1), 1, atol=1e-12)


# ------------------------------------------------------------ batch norm

def test_bn_train_normalizes():
    x = np.random.default_rng(1).normal(3, 2, size=(4, 5, 5, 3))
    bn = N.BatchNorm(3)
    y = N.batch_norm(t(x), bn, True).data
    assert np.abs(y.mean(axis=(0, 1, 2))).max() <= 1e-6
    assert np.abs(y.var(axis=(0, 1, 2)) - 1).max() <= 1e-5


def test_bn_constant_channel_gives_shift():
    x = np.random.default_rng(2).normal(size=(2, 3, 3, 2))
    x[..., 1] = 4.0
    bn = N.BatchNorm(2)
    bn.beta.data[:] = (0.3, -0.8)
    y = N.batch_norm(t(x), bn, True).data
    np.testing.assert_allclose(y[..., 1], -0.8, atol=1e-12)


def test_bn_eval_matches_train_with_batch_stats():
    x = np.random.default_rng(3).normal(size=(3, 4, 4, 2))
    bn = N.BatchNorm(2)
    bn.gamma.data[:] = (1.5, 0.5)
    bn.beta.data[:] = (0.1, -0.2)
    train = N.batch_norm(t(x), bn, True).data
    bn.running_mean[:] = x.mean(axis=(0, 1, 2))
    bn.running_var[:] = x.var(axis=(0, 1, 2))
    ev = N.batch_norm(t(x), bn, False).data
    np.testing.assert_allclose(ev, train, atol=1e-6)


def test_bn_running_stats_update():
    x = np.random.default_rng(4).normal(2, 1, size=(2, 3, 3, 1))
    bn = N.BatchNorm(1, momentum=0.1)
    N.batch_norm(t(x), bn, True)
    assert bn.running_mean[0] == pytest.approx(0.1 * x.mean())
    m = x.size
    assert bn.running_var[0] == pytest.approx(0.9 + 0.1 * x.var() * m / (m - 1))


# --------------------------------------------------------------- softmax

def test_softmax_uniform():
    np.testing.assert_allclose(N.softmax(t(np.zeros((1, 1, 1, 4)))).data, 0.25)


def test_softmax_large_logits():
    out = N.softmax(t(np.array([1000.0, 0, 0]).reshape(1, 1, 1, 3))).data.ravel()
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, (1, 0, 0), atol=1e-300)


def test_softmax_formula():
    z = np.array([1.0, 2.0, 3.0])
    out = N.softmax(t(z.reshape(1, 1, 1, 3))).data.ravel()
    np.testing.assert_allclose(out, np.exp(z) / np.exp(z).sum(), rtol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_distribution(z):
    out = N.softmax(t(np.array(z).reshape(1, 1, 1, -1))).data
    assert np.all(out >= 0)
    assert abs(out.sum() - 1) < 1e-12


# ---------------------------------------------------------------- pooling

def test_pools():
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    assert N.max_pool(t(x), 2).data.ravel().tolist() == [5, 7, 13, 15]
    assert N.avg_pool(t(x), 2).data.ravel().tolist() == [2.5, 4.5, 10.5, 12.5]
    assert N.global_max_pool(t(x)).data.item() == 15
    assert N.global_avg_pool(t(x)).data.item() == 7.5
    # stride-1 same-size pooling keeps the map size
    assert N.max_pool(t(x), 3, 1, padding=1).shape == x.shape


# ------------------------------------------------------------------ ReNet

def test_renet_zero_weights():
    net = N.ReNet(3, 4, np.random.default_rng(0))
    for p in net.params().values():
        p.data[...] = 0
    out = net(t(np.random.default_rng(1).normal(size=(2, 3, 4, 3))))
    assert out.shape == (2, 3, 4, 8)
    np.testing.assert_array_equal(out.data, 0)


def test_renet_full_receptive_field():
    rng = np.random.default_rng(2)
    net = N.ReNet(2, 3, rng)
    x = rng.normal(size=(1, 4, 4, 2))
    base = net(t(x)).data
    x[0, 0, 0] += 0.5
    moved = net(t(x)).data
    assert np.abs(moved[0, 3, 3] - base[0, 3, 3]).max() > 1e-8
    # every output pixel depends on every input pixel
    assert np.all(np.abs(moved - base).max(axis=-1) > 0)


def _lstm_step(x, cell):
    """One hand-unrolled LSTM step from zero state."""
    h = cell.hidden
    a = x @ cell.wx.data + cell.b.data
    sig = lambda z: 1 / (1 + np.exp(-z))
    i, g, o = sig(a[:h]), np.tanh(a[2 * h:3 * h]), sig(a[3 * h:])
    c = i * g
    return o * np.tanh(c)


def test_renet_single_pixel_matches_hand_lstm():
    rng = np.random.default_rng(3)
    net = N.ReNet(3, 2, rng)
    x = rng.normal(size=3)
    row = np.concatenate([_lstm_step(x, net.left_right), _lstm_step(x, net.right_left)])
    col = np.concatenate([_lstm_step(row, net.down_up), _lstm_step(row, net.up_down)])
    out = net(t(x.reshape(1, 1, 1, 3))).data.ravel()
    np.testing.assert_allclose(out, col, atol=1e-14)


def test_lstm_reverse_is_flip():
    rng = np.random.default_rng(4)
    cell = N.LSTMCell(2, 3, rng)
    x = rng.normal(size=(2, 5, 2))
    fwd_on_flipped = cell(t(x[:, ::-1].copy())).data[:, ::-1]
    np.testing.assert_allclose(cell(t(x), reverse=True).data, fwd_on_flipped, atol=1e-15)


def test_renet_rejects_bad_hidden():
    with pytest.raises(ValueError):
        N.ReNet(2, 0, np.random.default_rng(0))
