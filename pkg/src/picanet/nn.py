"""Convolution, normalization, resampling, pooling and recurrent scanning.

All ops take and return NHWC :class:`Tensor` objects and record exact
backward rules on the active graph.
"""

import numpy as np

from .tensor import Tensor, concat, get_default_dtype, record, register, reshape, transpose


def _pads(padding):
    if isinstance(padding, int):
        return padding, padding, padding, padding
    if len(padding) == 2:
        return padding[0], padding[0], padding[1], padding[1]
    return tuple(padding)


def out_size(n_in, k, stride, dilation, pad_total):
    eff = (k - 1) * dilation + 1
    return (n_in + pad_total - eff) // stride + 1


def _tap_slices(kh, kw, stride, dilation, ho, wo):
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * dilation, j * dilation
            yield (slice(None), slice(y0, y0 + stride * (ho - 1) + 1, stride),
                   slice(x0, x0 + stride * (wo - 1) + 1, stride), slice(None))


def _gather(xp, kh, kw, stride, dilation, ho, wo):
    """Stack every kernel tap of the padded input: (n, ho, wo, kh*kw, C)."""
    return np.stack([xp[s] for s in _tap_slices(kh, kw, stride, dilation, ho, wo)], axis=3)


def _scatter(gcols, xp_shape, kh, kw, stride, dilation, ho, wo):
    gxp = np.zeros(xp_shape, dtype=gcols.dtype)
    for t, s in enumerate(_tap_slices(kh, kw, stride, dilation, ho, wo)):
        gxp[s] += gcols[:, :, :, t, :]
    return gxp


def _geometry(x_shape, kh, kw, stride, dilation, padding):
    pt, pb, pl, pr = _pads(padding)
    ho = out_size(x_shape[1], kh, stride, dilation, pt + pb)
    wo = out_size(x_shape[2], kw, stride, dilation, pl + pr)
    if ho < 1 or wo < 1:
        raise ValueError(f"non-positive output size {(ho, wo)} for input {x_shape[1:3]}")
    return (pt, pb, pl, pr), ho, wo


def _unpad(gxp, pads):
    pt, pb, pl, pr = pads
    h, w = gxp.shape[1], gxp.shape[2]
    return gxp[:, pt:h - pb, pl:w - pr, :]


@register
def conv2d(x, weight, bias=None, stride=1, dilation=1, padding=0):
    """Direct 2-D convolution (cross-correlation), zero padding per side.

    ``weight`` is (kh, kw, C_in, C_out); ``padding`` is an int, a
    (vertical, horizontal) pair or (top, bottom, left, right). Accumulates
    one matmul per kernel tap instead of materializing im2col columns.
    """
    kh, kw, cin, cout = weight.shape
    if x.shape[3] != cin:
        raise ValueError(f"input has {x.shape[3]} channels, kernel expects {cin}")
    if min(kh, kw, stride, dilation) < 1:
        raise ValueError("kernel size, stride and dilation must be >= 1")
    pads, ho, wo = _geometry(x.shape, kh, kw, stride, dilation, padding)
    pt, pb, pl, pr = pads
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if any(pads) else x.data
    n = x.shape[0]
    w = weight.data
    taps = list(_tap_slices(kh, kw, stride, dilation, ho, wo))
    out = np.zeros((n, ho, wo, cout), dtype=x.dtype)
    for t, s in enumerate(taps):
        out += xp[s] @ w[divmod(t, kw)]
    if bias is not None:
        out += bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g2d = g.reshape(-1, cout)
        gw = np.empty_like(w)
        # the network input needs no gradient; skip the largest scatter
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for t, s in enumerate(taps):
            ij = divmod(t, kw)
            gw[ij] = xp[s].reshape(-1, cin).T @ g2d
            if gxp is not None:
                gxp[s] += g @ w[ij].T
        grads = (None if gxp is None else _unpad(gxp, pads), gw)
        if bias is not None:
            grads += (g2d.sum(axis=0),)
        return grads

    return record("conv2d", inputs, out, bwd)


def conv2d_reference(x, weight, bias=None, stride=1, dilation=1, padding=0):
    """Six nested loops; the oracle for :func:`conv2d`."""
    x = np.asarray(x)
    w = np.asarray(weight)
    kh, kw, cin, cout = w.shape
    pt, pb, pl, pr = _pads(padding)
    n, h, wd, _ = x.shape
    ho = out_size(h, kh, stride, dilation, pt + pb)
    wo = out_size(wd, kw, stride, dilation, pl + pr)
    out = np.zeros((n, ho, wo, cout))
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                for i in range(kh):
                    for j in range(kw):
                        y = oy * stride + i * dilation - pt
                        xx = ox * stride + j * dilation - pl
                        if 0 <= y < h and 0 <= xx < wd:
                            for c in range(cin):
                                out[b, oy, ox] += x[b, y, xx, c] * w[i, j, c]
    if bias is not None:
        out += np.asarray(bias)
    return out


def interp_matrix(n_in, n_out, dtype=np.float64):
    """Row ``o`` holds the align-corners bilinear weights of output ``o``."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(int), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


@register
def bilinear_upsample(x, out_h, out_w):
    """Align-corners bilinear resize (also used for downsizing masks)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be >= 1")
    ry = interp_matrix(x.shape[1], out_h, x.dtype)
    rx = interp_matrix(x.shape[2], out_w, x.dtype)
    out = np.einsum("yi,nijc,xj->nyxc", ry, x.data, rx, optimize=True)

    def bwd(g):
        return (np.einsum("yi,nyxc,xj->nijc", ry, g, rx, optimize=True),)

    return record("bilinear_upsample", (x,), out, bwd)


def resize_array(arr, out_h, out_w):
    """Bilinear resize of a plain (n, H, W, C) array outside any graph."""
    ry = interp_matrix(arr.shape[1], out_h, arr.dtype)
    rx = interp_matrix(arr.shape[2], out_w, arr.dtype)
    return np.einsum("yi,nijc,xj->nyxc", ry, arr, rx, optimize=True)


class BatchNorm:
    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=None):
        dtype = dtype or get_default_dtype()
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self.eps = eps
        self.momentum = momentum

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x, training):
        return batch_norm(x, self, training)


@register
def batch_norm(x, bn, training=True):
    """Per-channel normalization over (batch, height, width)."""
    if x.data.size == 0:
        raise ValueError("batch norm over an empty batch")
    gamma, beta = bn.gamma, bn.beta
    axes = (0, 1, 2)
    if training:
        m = x.data.shape[0] * x.data.shape[1] * x.data.shape[2]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv = 1.0 / np.sqrt(var + bn.eps)
        xhat = (x.data - mu) * inv
        mom = bn.momentum
        unbiased = var * m / max(m - 1, 1)
        bn.running_mean[...] = (1 - mom) * bn.running_mean + mom * mu
        bn.running_var[...] = (1 - mom) * bn.running_var + mom * unbiased

        def bwd(g):
            dxhat = g * gamma.data
            dx = inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        inv = 1.0 / np.sqrt(bn.running_var + bn.eps)
        xhat = (x.data - bn.running_mean) * inv

        def bwd(g):
            return g * gamma.data * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = (xhat * gamma.data + beta.data).astype(x.dtype, copy=False)
    return record("batch_norm", (x, gamma, beta), out, bwd)


@register
def softmax(x):
    """Max-stabilized softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record("softmax", (x,), s, bwd)


@register
def max_pool(x, k, stride=None, padding=0, dilation=1):
    stride = stride or k
    pads, ho, wo = _geometry(x.shape, k, k, stride, dilation, padding)
    pt, pb, pl, pr = pads
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=-np.inf)
    cols = _gather(xp, k, k, stride, dilation, ho, wo)
    idx = cols.argmax(axis=3)
    out = np.take_along_axis(cols, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def bwd(g):
        onehot = (np.arange(k * k)[None, None, None, :, None] == idx[:, :, :, None, :])
        gcols = onehot * g[:, :, :, None, :]
        return (_unpad(_scatter(gcols, xp.shape, k, k, stride, dilation, ho, wo), pads),)

    return record("max_pool", (x,), out, bwd)


@register
def avg_pool(x, k, stride=None, padding=0, dilation=1):
    """Average over the k*k taps; zero padding counts toward the mean."""
    stride = stride or k
    pads, ho, wo = _geometry(x.shape, k, k, stride, dilation, padding)
    pt, pb, pl, pr = pads
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    taps = list(_tap_slices(k, k, stride, dilation, ho, wo))
    out = np.zeros((x.shape[0], ho, wo, x.shape[3]), dtype=x.dtype)
    for s in taps:
        out += xp[s]
    out /= k * k

    def bwd(g):
        gxp = np.zeros_like(xp)
        gk = g / (k * k)
        for s in taps:
            gxp[s] += gk
        return (_unpad(gxp, pads),)

    return record("avg_pool", (x,), out, bwd)


@register
def global_avg_pool(x):
    n, h, w, c = x.shape
    return record("global_avg_pool", (x,), x.data.mean(axis=(1, 2), keepdims=True),
                  lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


@register
def global_max_pool(x):
    n, h, w, c = x.shape
    flat = x.data.reshape(n, h * w, c)
    idx = flat.argmax(axis=1)
    out = np.take_along_axis(flat, idx[:, None, :], axis=1).reshape(n, 1, 1, c)

    def bwd(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, idx[:, None, :], g.reshape(n, 1, c), axis=1)
        return (gf.reshape(x.shape),)

    return record("global_max_pool", (x,), out, bwd)


# ------------------------------------------------------------------ recurrent

def _sig(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


@register
def lstm_scan(x, wx, wh, b, reverse=False):
    """Run one LSTM over sequences x (B, T, C_in) from zero state.

    Gate order in the 4*hidden axis is input, forget, candidate, output.
    Returns every hidden state, (B, T, hidden), in input order.
    """
    bsz, steps, _ = x.shape
    hid = wh.shape[0]
    dtype = x.dtype
    xs = x.data[:, ::-1] if reverse else x.data
    pre_x = xs @ wx.data + b.data
    h = np.zeros((bsz, hid), dtype)
    c = np.zeros((bsz, hid), dtype)
    hs = np.empty((bsz, steps + 1, hid), dtype)
    cs = np.empty((bsz, steps + 1, hid), dtype)
    gates = np.empty((bsz, steps, 4 * hid), dtype)
    hs[:, 0] = h
    cs[:, 0] = c
    for t in range(steps):
        a = pre_x[:, t] + h @ wh.data
        i = _sig(a[:, :hid])
        f = _sig(a[:, hid:2 * hid])
        gg = np.tanh(a[:, 2 * hid:3 * hid])
        o = _sig(a[:, 3 * hid:])
        c = f * c + i * gg
        h = o * np.tanh(c)
        gates[:, t] = np.concatenate([i, f, gg, o], axis=1)
        hs[:, t + 1] = h
        cs[:, t + 1] = c
    out = hs[:, 1:]
    out = out[:, ::-1].copy() if reverse else out.copy()

    def bwd(gout):
        gout = gout[:, ::-1] if reverse else gout
        dwx = np.zeros_like(wx.data)
        dwh = np.zeros_like(wh.data)
        dpre = np.empty((bsz, steps, 4 * hid), dtype)
        dh_next = np.zeros((bsz, hid), dtype)
        dc_next = np.zeros((bsz, hid), dtype)
        for t in reversed(range(steps)):
            i, f, gg, o = np.split(gates[:, t], 4, axis=1)
            tc = np.tanh(cs[:, t + 1])
            dh = gout[:, t] + dh_next
            dc = dc_next + dh * o * (1 - tc * tc)
            da = np.concatenate([
                dc * gg * i * (1 - i),
                dc * cs[:, t] * f * (1 - f),
                dc * i * (1 - gg * gg),
                dh * tc * o * (1 - o),
            ], axis=1)
            dpre[:, t] = da
            dwh += hs[:, t].T @ da
            dh_next = da @ wh.data.T
            dc_next = dc * f
        dx = dpre @ wx.data.T
        dwx = xs.reshape(-1, xs.shape[-1]).T @ dpre.reshape(-1, 4 * hid)
        db = dpre.sum(axis=(0, 1))
        if reverse:
            dx = dx[:, ::-1]
        return np.ascontiguousarray(dx), dwx, dwh, db

    return record("lstm_scan", (x, wx, wh, b), out, bwd)


def _orthogonal(rng, n, dtype):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * np.sign(np.diag(r))).astype(dtype)


class LSTMCell:
    def __init__(self, n_in, hidden, rng, dtype=None):
        dtype = dtype or get_default_dtype()
        bound = np.sqrt(1.0 / n_in)
        self.hidden = hidden
        self.wx = Tensor(rng.uniform(-bound, bound, (n_in, 4 * hidden)), True, dtype)
        self.wh = Tensor(np.concatenate([_orthogonal(rng, hidden, dtype) for _ in range(4)], 1),
                         True, dtype)
        b = np.zeros(4 * hidden, dtype)
        b[hidden:2 * hidden] = 1.0
        self.b = Tensor(b, True, dtype)

    def params(self):
        return {"wx": self.wx, "wh": self.wh, "b": self.b}

    def __call__(self, seq, reverse=False):
        return lstm_scan(seq, self.wx, self.wh, self.b, reverse)


class ReNet:
    """Horizontal then vertical bidirectional LSTM sweeps.

    The row result (2*hidden channels) feeds the column sweep unmodified;
    the output has 2*hidden channels.
    """

    def __init__(self, n_in, hidden, rng, dtype=None):
        if hidden <= 0:
            raise ValueError("hidden must be positive")
        self.hidden = hidden
        self.left_right = LSTMCell(n_in, hidden, rng, dtype)
        self.right_left = LSTMCell(n_in, hidden, rng, dtype)
        self.down_up = LSTMCell(2 * hidden, hidden, rng, dtype)
        self.up_down = LSTMCell(2 * hidden, hidden, rng, dtype)

    def params(self):
        out = {}
        for name in ("left_right", "right_left", "down_up", "up_down"):
            for k, v in getattr(self, name).params().items():
                out[f"{name}.{k}"] = v
        return out

    def __call__(self, x):
        return renet(x, self)


def renet(x, cells):
    n, h, w, c = x.shape
    hid = cells.hidden
    rows = reshape(x, (n * h, w, c))
    rows = concat([cells.left_right(rows), cells.right_left(rows, reverse=True)])
    rows = reshape(rows, (n, h, w, 2 * hid))
    cols = reshape(transpose(rows, (0, 2, 1, 3)), (n * w, h, 2 * hid))
    # column index grows downward, so the bottom-up sweep is the reversed one
    cols = concat([cells.down_up(cols, reverse=True), cells.up_down(cols)])
    return transpose(reshape(cols, (n, w, h, 2 * hid)), (0, 2, 1, 3))


class Conv:
    """Conv layer parameters plus geometry; ``same`` padding by default."""

    def __init__(self, cin, cout, k=1, rng=None, stride=1, dilation=1, padding=None,
                 dtype=None, bias=True):
        dtype = dtype or get_default_dtype()
        kh, kw = (k, k) if isinstance(k, int) else k
        fan_in = kh * kw * cin
        bound = np.sqrt(6.0 / fan_in)
        if rng is None:
            w = np.zeros((kh, kw, cin, cout))
        else:
            w = rng.uniform(-bound, bound, (kh, kw, cin, cout))
        self.weight = Tensor(w, True, dtype)
        self.bias = Tensor(np.zeros(cout), True, dtype) if bias else None
        self.stride = stride
        self.dilation = dilation
        if padding is None:
            padding = ((kh - 1) * dilation // 2, (kw - 1) * dilation // 2)
        self.padding = padding

    @property
    def kernel_size(self):
        return self.weight.shape[:2]

    def params(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.padding)
