"""Finite-difference gradient suite over the registered ops and a tiny model."""

import time

import numpy as np

from . import attention as A
from . import losses as L
from . import nn as N
from . import tensor as T
from .model import SaliencyNet, preset_config
from .tensor import Graph, Tensor, backward, default_dtype, fd_check, get_default_dtype, no_grad

TOL = 1e-6
TOL32 = 1e-4


def _t(a):
    return Tensor(np.asarray(a), requires_grad=True, dtype=get_default_dtype())


def _away(rng, shape, lo=0.1, hi=1.0):
    """Random values with magnitude in [lo, hi] and random sign."""
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _spread(rng, shape):
    """Distinct values at least 0.01 apart, shuffled (no near-ties for max)."""
    n = int(np.prod(shape))
    v = np.arange(n) * 0.01 + rng.uniform(0, 0.002, n)
    return rng.permutation(v).reshape(shape) - n * 0.005


def _bind(obj, names, tensors):
    for name, t in zip(names, tensors):
        *path, leaf = name.split(".")
        target = obj
        for p in path:
            target = getattr(target, p)
        setattr(target, leaf, t)


def _module_case(obj, x, fn, opts=None):
    names = list(obj.params())
    inputs = [x] + [_t(obj.params()[k].data) for k in names]

    def op(ts):
        _bind(obj, names, ts[1:])
        return fn(ts[0])

    return op, inputs, dict(SAMPLED, **(opts or {}))


# One entry per case: name -> builder(rng) returning (op, inputs) or
# (op, inputs, fd_check keyword overrides).

SMALL_STEP = {"eps": 1e-4}
# recurrent composites have gradients near the 64-bit rounding floor
SAMPLED = {"sample": 6, "ref_dtype": np.longdouble}


def _conv(rng):
    x, w, b = _t(rng.normal(size=(2, 5, 6, 2))), _t(rng.normal(size=(3, 3, 2, 3))), _t(rng.normal(size=3))
    return lambda ts: N.conv2d(ts[0], ts[1], ts[2], 1, 2, 2), [x, w, b]


def _conv_stride(rng):
    x, w = _t(rng.normal(size=(1, 7, 6, 2))), _t(rng.normal(size=(3, 2, 2, 2)))
    return lambda ts: N.conv2d(ts[0], ts[1], None, 2, 1, (1, 1, 0, 1)), [x, w]


def _bn(training):
    def build(rng):
        bn = N.BatchNorm(3)
        bn.running_mean[:] = rng.normal(size=3)
        bn.running_var[:] = rng.uniform(0.5, 2, 3)
        x = _t(rng.normal(size=(2, 3, 3, 3)))
        g, b = _t(rng.uniform(0.5, 1.5, 3)), _t(rng.normal(size=3))

        def op(ts):
            bn.gamma, bn.beta = ts[1], ts[2]
            return N.batch_norm(ts[0], bn, training)

        return op, [x, g, b]
    return build


def _unary(fn, gen):
    return lambda rng: (lambda ts: fn(ts[0]), [_t(gen(rng))])


def _lstm(reverse):
    def build(rng):
        h = 3
        cell = N.LSTMCell(2, h, rng)
        ins = [_t(rng.normal(size=(2, 4, 2))), _t(cell.wx.data), _t(cell.wh.data), _t(cell.b.data)]
        return lambda ts: N.lstm_scan(ts[0], ts[1], ts[2], ts[3], reverse), ins
    return build


def _renet(rng):
    net = N.ReNet(2, 2, rng)
    return _module_case(net, _t(rng.normal(size=(1, 3, 4, 2))), net)


def _head_global(rng):
    grid = A.global_grid_for(4, 10)
    head = A.GlobalAttentionHead(2, grid, 2, rng)
    return _module_case(head, _t(rng.normal(size=(1, 4, 4, 2))),
                        lambda x: A.attention_head(x, head).weights)


def _head_local(kind):
    def build(rng):
        grid = A.ContextGrid.square(3, 1)
        head = A.LocalAttentionHead(2, grid, 2, rng, kernel=3, dilation=1, kind=kind)
        # the inner ReLU has kinks within reach of the default stencil
        return _module_case(head, _t(rng.normal(size=(1, 4, 4, 2))),
                            lambda x: A.attention_head(x, head).weights, SMALL_STEP)
    return build


def _pool_global(rng):
    grid = A.ContextGrid.square(3, 2, "global")
    f = _t(rng.normal(size=(2, 5, 5, 2)))
    a = _t(rng.normal(size=(2, 5, 5, 9)))
    return lambda ts: A.attend_pool(ts[0], A.AttentionField(N.softmax(ts[1]), grid)), [f, a]


def _pool_local(rng):
    grid = A.ContextGrid.square(3, 2)
    f = _t(rng.normal(size=(1, 5, 6, 2)))
    a = _t(rng.normal(size=(1, 5, 6, 9)))
    return lambda ts: A.attend_pool(ts[0], A.AttentionField(N.softmax(ts[1]), grid)), [f, a]


def _aconv(rng):
    grid = A.ContextGrid.square(3, 2)
    f = _t(rng.normal(size=(1, 5, 5, 2)))
    gates = _t(rng.normal(size=(1, 5, 5, 9)))
    w, b = _t(rng.normal(size=(3, 3, 2, 3))), _t(rng.normal(size=3))

    def op(ts):
        field = A.AttentionField(T.sigmoid(ts[1]), grid, "sigmoid")
        return A.attend_conv(ts[0], field, ts[2], ts[3])

    return op, [f, gates, w, b]


def _ce(rng):
    target = rng.uniform(0, 1, (2, 3, 3, 1))
    return lambda ts: L.saliency_ce(ts[0], target), [_t(rng.uniform(0.05, 0.95, (2, 3, 3, 1)))]


def _ce_resized(rng):
    gt = (rng.uniform(size=(1, 8, 8)) > 0.5).astype(float)
    return lambda ts: L.saliency_ce_loss(T.sigmoid(ts[0]), gt), [_t(rng.normal(size=(1, 4, 4, 1)))]


def _kl(rng):
    grid = A.global_grid_for(4, 10)
    g6 = (rng.uniform(size=(2, 4, 4)) > 0.5).astype(float)
    g6[:, 0, 0], g6[:, 3, 3] = 1, 0
    gt = L.ground_truth_attention(g6, grid)

    def op(ts):
        return L.global_attention_loss(A.AttentionField(N.softmax(ts[0]), grid), gt)

    return op, [_t(rng.normal(size=(2, 4, 4, grid.size)))]


def _total(rng):
    w = L.LossWeights()

    def op(ts):
        return L.total_loss(ts[:6], ts[6], w)

    return op, [_t(rng.uniform(0.1, 2, (1, 1, 1, 1))) for _ in range(7)]


def _binary(fn, shape_b=None):
    def build(rng):
        a = _t(rng.normal(size=(2, 3, 2, 3)))
        b = _t(rng.normal(size=shape_b or (2, 3, 2, 3)))
        return lambda ts: fn(ts[0], ts[1]), [a, b]
    return build


CASES = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "scale": _unary(lambda x: T.scale(x, -1.7), lambda r: r.normal(size=(2, 3))),
    "add_bias": _binary(T.add_bias, (3,)),
    "sum_all": _unary(T.sum_all, lambda r: r.normal(size=(2, 3, 2))),
    "mean_all": _unary(T.mean_all, lambda r: r.normal(size=(2, 3, 2))),
    "reshape": _unary(lambda x: T.reshape(x, (3, 4)), lambda r: r.normal(size=(2, 6))),
    "concat": _binary(lambda a, b: T.concat([a, b], axis=-1), (2, 3, 2, 1)),
    "relu": _unary(T.relu, lambda r: _away(r, (3, 4))),
    "sigmoid": _unary(T.sigmoid, lambda r: r.normal(scale=3, size=(3, 4))),
    "tanh": _unary(T.tanh, lambda r: r.normal(size=(3, 4))),
    "log": _unary(T.log, lambda r: r.uniform(0.2, 3, (3, 4))),
    "clamp": _unary(lambda x: T.clamp(x, -0.5, 0.5),
                    lambda r: r.choice([-1, 1], (3, 4)) * r.choice([0.2, 0.8], (3, 4))
                    + r.uniform(-0.1, 0.1, (3, 4))),
    "matmul": _binary(T.matmul, (3, 2)),
    "transpose": _unary(lambda x: T.transpose(x, (0, 2, 1, 3)), lambda r: r.normal(size=(1, 2, 3, 2))),
    "flip": _unary(lambda x: T.flip(x, 1), lambda r: r.normal(size=(2, 3, 2))),
    "conv2d": _conv,
    "conv2d_strided": _conv_stride,
    "bilinear_upsample": _unary(lambda x: N.bilinear_upsample(x, 5, 7), lambda r: r.normal(size=(1, 3, 4, 2))),
    "batch_norm_train": _bn(True),
    "batch_norm_eval": _bn(False),
    "softmax": _unary(N.softmax, lambda r: r.normal(scale=2, size=(2, 3, 5))),
    "max_pool": _unary(lambda x: N.max_pool(x, 3, 1, 1), lambda r: _spread(r, (1, 4, 4, 2))),
    "max_pool_stride": _unary(lambda x: N.max_pool(x, 2, 2), lambda r: _spread(r, (1, 4, 6, 2))),
    "avg_pool": _unary(lambda x: N.avg_pool(x, 3, 1, 2, 2), lambda r: r.normal(size=(1, 4, 5, 2))),
    "global_avg_pool": _unary(N.global_avg_pool, lambda r: r.normal(size=(2, 3, 3, 2))),
    "global_max_pool": _unary(N.global_max_pool, lambda r: _spread(r, (2, 3, 3, 2))),
    "lstm_scan": _lstm(False),
    "lstm_scan_reverse": _lstm(True),
    "renet": _renet,
    "attention_head_global": _head_global,
    "attention_head_local_softmax": _head_local("softmax"),
    "attention_head_local_sigmoid": _head_local("sigmoid"),
    "attend_pool_global": _pool_global,
    "attend_pool_local": _pool_local,
    "attend_conv": _aconv,
    "saliency_ce": _ce,
    "saliency_ce_resized": _ce_resized,
    "kl_attention": _kl,
    "total_loss": _total,
}

# which registered op each case exercises (cases may cover several)
COVERS = {
    "conv2d_strided": "conv2d", "batch_norm_train": "batch_norm", "batch_norm_eval": "batch_norm",
    "max_pool_stride": "max_pool", "lstm_scan_reverse": "lstm_scan",
    "attend_pool_global": "attend_pool", "attend_pool_local": "attend_pool",
    "saliency_ce_resized": "saliency_ce", "kl_attention": "kl_attention",
}


def tiny_config(preset="+6GAP_5432AC"):
    return preset_config(
        preset, input_size=16, channels=(2, 3, 3, 4, 4), fc_channels=4,
        convs_per_block=(1, 1, 1, 1, 1), fc6_dilation=1, local_grid=3, local_dilation=1,
        local_head_channels=2, local_head_kernel=3, local_head_dilation=1, renet_hidden=2)


def inert(name):
    """Parameters whose gradient vanishes identically: a bias feeding straight
    into training-mode batch norm is removed by the mean subtraction."""
    return name.endswith("out_conv.bias") or name == "encoder.fc7.bias"


FD_STEPS = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)


def model_fd_check(seed, preset="+6GAP_5432AC", entries=10):
    """Relative error on randomly sampled parameter entries of a tiny network.

    Analytic gradients come from the 64-bit model. The central-difference
    reference runs on an extended-precision copy with identical parameters,
    because some entries have gradients near 1e-8, below what a 64-bit
    difference of an O(1) loss resolves. Each entry gets a 5-point estimate
    at several steps and the adjacent pair that agrees best is used: large
    steps can cross ReLU kinks, small ones drown in rounding. Inert
    parameters are checked to have a zero gradient instead.
    """
    rng = np.random.default_rng(seed)
    cfg = tiny_config(preset)
    model = SaliencyNet(cfg, seed=seed, dtype=np.float64).train()
    # zero biases put whole channels exactly on ReLU kinks; move off them
    for name, p in model.params().items():
        if name.endswith((".bias", ".beta")):
            p.data[...] = rng.normal(scale=0.1, size=p.shape)
    ref = SaliencyNet(cfg, init="zeros", dtype=np.longdouble).train()
    for p, q in zip(model.params().values(), ref.params().values()):
        q.data[...] = p.data
    x = rng.normal(size=(2, 16, 16, 3))
    masks = np.zeros((2, 16, 16))
    for b in range(2):
        y0, x0 = rng.integers(0, 8, 2)
        masks[b, y0:y0 + 7, x0:x0 + 6] = 1
    weights = L.LossWeights()

    def loss(net, dtype):
        return L.network_loss(net(x.astype(dtype)), masks, cfg, weights)[0]

    params = model.params()
    with Graph() as g:
        total = loss(model, np.float64)
    backward(g, total, wrt=list(params.values()))
    worst = 0.0
    for name, p in params.items():
        if inert(name) and np.abs(p.grad).max() > 1e-10:
            worst = np.inf
    names = [n for n in params if not inert(n)]
    rparams = ref.params()
    for _ in range(entries):
        name = names[rng.integers(len(names))]
        k = int(rng.integers(params[name].data.size))
        a = float(params[name].grad.reshape(-1)[k])
        flat = rparams[name].data.reshape(-1)
        orig = flat[k]
        est = []
        with no_grad():
            for h in FD_STEPS:
                f = []
                for step in (h, -h, 2 * h, -2 * h):
                    flat[k] = orig + step
                    f.append(loss(ref, np.longdouble).data.reshape(()))
                est.append(float((8 * (f[0] - f[1]) - (f[2] - f[3])) / (12 * h)))
        flat[k] = orig
        j = int(np.argmin(np.abs(np.diff(est))))
        cd = est[j + 1]
        worst = max(worst, abs(a - cd) / max(abs(a), abs(cd), 1e-8))
    return worst


def run_suite(seeds=20, cases=None, model_seeds=None, log=None, dtype=np.float64,
              projection="random"):
    """Max relative error per case over ``seeds`` seeds; returns (results, seconds).

    With ``dtype=np.float32`` the analytic gradients are computed in 32-bit
    and the difference quotients on 64-bit copies; the model case is
    64-bit only.
    """
    start = time.perf_counter()
    results = {}
    names = [n for n in (cases or CASES) if n != "model"]
    low = np.dtype(dtype) == np.float32
    with default_dtype(dtype):
        for name in names:
            errs = []
            for s in range(seeds):
                rng = np.random.default_rng(1000 + s)
                op, inputs, *opts = CASES[name](rng)
                opts = dict(opts[0]) if opts else {}
                if low:
                    opts.setdefault("ref_dtype", np.float64)
                opts.setdefault("projection", projection)
                errs.append(fd_check(op, inputs, seed=s, **opts))
            results[name] = max(errs)
            if log:
                log(name, results[name])
    with default_dtype(np.float64):
        if not low and (cases is None or "model" in cases):
            errs = [model_fd_check(s) for s in range(model_seeds or seeds)]
            results["model"] = max(errs)
            if log:
                log("model", results["model"])
    return results, time.perf_counter() - start


def coverage():
    """Registered op names not exercised by any case (should be empty)."""
    covered = {COVERS.get(n, n) for n in CASES}
    return sorted(set(T.OPS) - covered)


def describe(results, tol=TOL):
    return [(k, v, v < tol) for k, v in results.items()]



def precision_gap(name, seed, dtype=np.float32):
    """Largest |g_low - g64| over a case's inputs, relative to max |g64|.

    Both gradients are analytic and use the same random output projection,
    so this measures rounding in the backward pass alone, without the
    cancellation a finite difference suffers at low precision.
    """
    def grads(dt):
        with default_dtype(dt):
            op, ins, *_ = CASES[name](np.random.default_rng(1000 + seed))
            ins = [Tensor(t.data, True, dtype=dt) for t in ins]
            with Graph() as g:
                out = op(ins)
                w = np.random.default_rng(seed).standard_normal(out.shape)
                loss = T.sum_all(T.mul(out, Tensor(w, dtype=dt)))
            gr = backward(g, loss, wrt=ins)
        return [gr[t.id].astype(np.float64) for t in ins]

    ref = grads(np.float64)
    scale = max(max(np.abs(b).max() for b in ref), 1e-8)
    return max(np.abs(a - b).max() for a, b in zip(grads(dtype), ref)) / scale
