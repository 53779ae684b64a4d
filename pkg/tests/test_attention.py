import itertools

import numpy as np
import pytest

from picanet import attention as A
from picanet.nn import Conv, conv2d, softmax
from picanet.tensor import Tensor


def t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def field(weights, grid, kind="softmax"):
    return A.AttentionField(t(weights), grid, kind)


# ------------------------------------------------------------------- grid

def test_grid_geometry():
    g = A.ContextGrid.square(7, 2)
    assert g.size == 49 and g.span == (13, 13) and g.radius == (6, 6)
    dy, dx = g.offsets()
    assert (dy[0], dx[0]) == (-6, -6) and (dy[24], dx[24]) == (0, 0) and (dy[48], dx[48]) == (6, 6)
    gg = A.ContextGrid.square(10, 3, "global")
    ys, xs = gg.source_pixels()
    assert (ys[11], xs[11]) == (3, 3) and (ys[-1], xs[-1]) == (27, 27)


def test_grid_errors():
    with pytest.raises(ValueError):
        A.ContextGrid.square(4, 1, "local")
    with pytest.raises(ValueError):
        A.ContextGrid.square(3, 0)
    with pytest.raises(ValueError):
        A.ContextGrid.square(3, 1, "sideways")
    with pytest.raises(ValueError):
        A.ContextGrid.square(10, 3, "global").check(8, 8)


@pytest.mark.parametrize("extent", [1, 2, 4, 8, 13, 28])
def test_global_grid_spans_map(extent):
    g = A.global_grid_for(extent)
    assert g.span == (extent, extent) and g.grid_h <= 10
    if extent == 28:
        assert (g.grid_h, g.dilation) == (10, 3)


# ------------------------------------------------------------------ heads

def _zero_proj(head):
    head.proj.weight.data[...] = 0
    head.proj.bias.data[...] = 0


def test_zero_head_softmax_is_uniform():
    rng = np.random.default_rng(0)
    head = A.LocalAttentionHead(3, A.ContextGrid.square(7, 2), 4, rng)
    _zero_proj(head)
    att = A.attention_head(t(rng.normal(size=(1, 6, 6, 3))), head)
    np.testing.assert_allclose(att.weights.data, 1 / 49, rtol=1e-14)


def test_zero_head_sigmoid_is_half():
    rng = np.random.default_rng(1)
    head = A.LocalAttentionHead(3, A.ContextGrid.square(7, 2), 4, rng, kind="sigmoid")
    _zero_proj(head)
    att = A.attention_head(t(rng.normal(size=(2, 5, 5, 3))), head)
    np.testing.assert_array_equal(att.weights.data, 0.5)


@pytest.mark.parametrize("kind", ["global", "local"])
def test_random_head_sums_to_one(kind):
    rng = np.random.default_rng(2)
    if kind == "global":
        head = A.GlobalAttentionHead(3, A.global_grid_for(8), 4, rng)
    else:
        head = A.LocalAttentionHead(3, A.ContextGrid.square(7, 2), 4, rng)
    att = A.attention_head(t(rng.normal(size=(1, 8, 8, 3))), head)
    assert np.abs(att.weights.data.sum(axis=-1) - 1).max() <= 1e-6
    assert att.maps().shape == (1, 8, 8, att.grid.grid_h, att.grid.grid_w)


def test_head_receptive_field_check():
    with pytest.raises(ValueError):
        A.LocalAttentionHead(3, A.ContextGrid.square(7, 2), 4, np.random.default_rng(0),
                             kernel=3, dilation=1)


def test_head_grid_mismatch():
    rng = np.random.default_rng(3)
    head = A.LocalAttentionHead(3, A.ContextGrid.square(3, 1), 4, rng, kernel=3, dilation=1)
    with pytest.raises(ValueError):
        A.attention_head(t(np.ones((1, 4, 4, 3))), head, grid=A.ContextGrid.square(5, 1))
    with pytest.raises(ValueError):
        A.attention_head(t(np.ones((1, 4, 4, 3))), head, kind="relu")


# ------------------------------------------------------------ attend_pool

@pytest.mark.parametrize("mode", ["global", "local"])
def test_one_hot_attention_gathers(mode):
    rng = np.random.default_rng(4)
    grid = A.ContextGrid.square(3, 2, mode)
    f = rng.normal(size=(1, 5, 5, 2))
    i = 5
    w = np.zeros((1, 5, 5, 9))
    w[..., i] = 1
    out = A.attend_pool(t(f), field(w, grid)).data
    r, c = divmod(i, 3)
    for y, x in itertools.product(range(5), range(5)):
        if mode == "global":
            sy, sx = r * 2, c * 2
        else:
            sy, sx = y + (r - 1) * 2, x + (c - 1) * 2
        want = f[0, sy, sx] if 0 <= sy < 5 and 0 <= sx < 5 else 0
        np.testing.assert_array_equal(out[0, y, x], want)


def test_uniform_global_is_mean_pool():
    f = np.random.default_rng(5).normal(size=(2, 6, 6, 3))
    grid = A.ContextGrid.square(6, 1, "global")
    out = A.attend_pool(t(f), field(np.full((2, 6, 6, 36), 1 / 36), grid)).data
    np.testing.assert_allclose(out, np.broadcast_to(f.mean(axis=(1, 2), keepdims=True), f.shape),
                               atol=1e-10)


def test_attend_pool_small_local_case():
    rng = np.random.default_rng(6)
    grid = A.ContextGrid.square(3, 2)
    f = rng.normal(size=(1, 6, 6, 3))
    w = softmax(t(rng.normal(size=(1, 6, 6, 9)))).data
    np.testing.assert_allclose(A.attend_pool(t(f), field(w, grid)).data,
                               A.attend_pool_reference(f, w, grid), atol=1e-10, rtol=0)


def test_attend_pool_shape_errors():
    grid = A.ContextGrid.square(3, 1)
    with pytest.raises(ValueError):
        A.attend_pool(t(np.ones((1, 4, 4, 2))), field(np.ones((1, 4, 4, 8)), grid))
    with pytest.raises(ValueError):
        A.attend_pool(t(np.ones((1, 4, 4, 2))), field(np.ones((1, 4, 5, 9)), grid))
    with pytest.raises(ValueError):
        g = A.ContextGrid.square(3, 3, "global")
        A.attend_pool(t(np.ones((1, 4, 4, 2))), field(np.ones((1, 4, 4, 9)), g))


# ------------------------------------------------------------ attend_conv

def test_unit_gates_equal_conv():
    rng = np.random.default_rng(7)
    grid = A.ContextGrid.square(5, 2)
    f = rng.normal(size=(2, 7, 6, 3))
    w, b = rng.normal(size=(5, 5, 3, 4)), rng.normal(size=4)
    out = A.attend_conv(t(f), field(np.ones((2, 7, 6, 25)), grid, "sigmoid"), t(w), t(b)).data
    ref = conv2d(t(f), t(w), t(b), dilation=2, padding=4).data
    np.testing.assert_allclose(out, ref, atol=1e-10, rtol=0)


def test_zero_gates_give_bias():
    rng = np.random.default_rng(8)
    grid = A.ContextGrid.square(3, 1)
    b = rng.normal(size=2)
    out = A.attend_conv(t(rng.normal(size=(1, 4, 4, 3))), field(np.zeros((1, 4, 4, 9)), grid),
                        t(rng.normal(size=(3, 3, 3, 2))), t(b)).data
    np.testing.assert_array_equal(out, np.broadcast_to(b, out.shape))


def test_attend_conv_small_case():
    rng = np.random.default_rng(9)
    grid = A.ContextGrid.square(3, 1)
    f, gates = rng.normal(size=(1, 5, 5, 2)), rng.uniform(size=(1, 5, 5, 9))
    w, b = rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    out = A.attend_conv(t(f), field(gates, grid), t(w), t(b)).data
    np.testing.assert_allclose(out, A.attend_conv_reference(f, gates, w, b, grid), atol=1e-10)


def test_attend_conv_errors():
    grid = A.ContextGrid.square(3, 1)
    f = t(np.ones((1, 4, 4, 2)))
    gates = field(np.ones((1, 4, 4, 9)), grid)
    with pytest.raises(ValueError):
        A.attend_conv(f, gates, t(np.ones((5, 5, 2, 1))))
    with pytest.raises(ValueError):
        A.attend_conv(f, gates, t(np.ones((3, 3, 3, 1))))
    with pytest.raises(ValueError):
        g = A.ContextGrid.square(3, 1, "global")
        A.attend_conv(f, field(np.ones((1, 4, 4, 9)), g), t(np.ones((3, 3, 2, 1))))


# ------------------------------------------------------------------ dumps

def test_dump_attention(tmp_path):
    rng = np.random.default_rng(10)
    grid = A.global_grid_for(8)
    w = softmax(t(rng.normal(size=(1, 8, 8, grid.size)))).data
    fa = field(w, grid)
    from PIL import Image
    p1 = A.dump_attention(fa, 0, 1, 2, tmp_path, "a_y1_x2")
    p2 = A.dump_attention(fa, 0, 5, 6, tmp_path, "a_y5_x6")
    assert p1 != p2
    img = np.array(Image.open(p1))
    assert img.shape == (grid.grid_h * 16, grid.grid_w * 16)
    assert img.max() == 255 and img.min() == 0
    side = dict(line.split("=") for line in p1.with_suffix(".txt").read_text().split())
    assert float(side["weight_sum"]) == pytest.approx(1.0, abs=1e-6)
    assert side["mode"] == "global" and side["pixel_y"] == "1"
