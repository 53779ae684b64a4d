"""Pixel-wise contextual attention: weight generation and the attending ops.

Every pixel owns a weight vector over D context positions laid out on a
dilated grid. Weight index ``i`` maps to grid cell ``(i // grid_w,
i % grid_w)``. A global grid samples absolute source pixels ``(row*d,
col*d)``; a local grid samples offsets ``((row - grid_h//2)*d, (col -
grid_w//2)*d)`` around the pixel, with zero features off the image.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .nn import Conv, ReNet, _tap_slices, softmax
from .tensor import Tensor, record, register, relu, sigmoid


@dataclass(frozen=True)
class ContextGrid:
    grid_h: int
    grid_w: int
    dilation: int = 1
    mode: str = "local"

    def __post_init__(self):
        if self.mode not in ("global", "local"):
            raise ValueError(f"unknown grid mode {self.mode!r}")
        if min(self.grid_h, self.grid_w, self.dilation) < 1:
            raise ValueError("grid size and dilation must be >= 1")
        if self.mode == "local" and (self.grid_h % 2 == 0 or self.grid_w % 2 == 0):
            raise ValueError("local grids must have odd size")

    @classmethod
    def square(cls, g, dilation=1, mode="local"):
        return cls(g, g, dilation, mode)

    @property
    def size(self):
        return self.grid_h * self.grid_w

    @property
    def span(self):
        return ((self.grid_h - 1) * self.dilation + 1, (self.grid_w - 1) * self.dilation + 1)

    @property
    def radius(self):
        return (self.grid_h // 2 * self.dilation, self.grid_w // 2 * self.dilation)

    def source_pixels(self):
        """Global mode: (ys, xs) of every grid cell in weight-index order."""
        rows, cols = np.divmod(np.arange(self.size), self.grid_w)
        return rows * self.dilation, cols * self.dilation

    def offsets(self):
        """Local mode: (dy, dx) of every grid cell in weight-index order."""
        rows, cols = np.divmod(np.arange(self.size), self.grid_w)
        return (rows - self.grid_h // 2) * self.dilation, (cols - self.grid_w // 2) * self.dilation

    def check(self, height, width):
        if self.mode == "global":
            sh, sw = self.span
            if sh > height or sw > width:
                raise ValueError(f"global grid span {self.span} exceeds map {(height, width)}")

    def describe(self):
        return (f"mode={self.mode}\ngrid_h={self.grid_h}\ngrid_w={self.grid_w}\n"
                f"dilation={self.dilation}\nspan={self.span[0]}x{self.span[1]}\n")


def global_grid_for(extent, max_grid=10, preferred=(10, 3)):
    """Pick a global grid that exactly spans ``extent`` pixels.

    The preferred (grid, dilation) wins when it fits exactly; otherwise the
    largest grid up to ``max_grid`` whose dilated span equals the extent.
    """
    g, d = preferred
    if (g - 1) * d + 1 == extent:
        return ContextGrid.square(g, d, "global")
    if extent == 1:
        return ContextGrid.square(1, 1, "global")
    for g in range(min(max_grid, extent), 1, -1):
        if (extent - 1) % (g - 1) == 0:
            return ContextGrid.square(g, (extent - 1) // (g - 1), "global")
    raise AssertionError("unreachable: g=2 always divides")


@dataclass
class AttentionField:
    weights: Tensor
    grid: ContextGrid
    kind: str = "softmax"

    @property
    def shape(self):
        return self.weights.shape

    def maps(self):
        """Weights reshaped to (n, H, W, grid_h, grid_w)."""
        n, h, w, _ = self.weights.shape
        return self.weights.data.reshape(n, h, w, self.grid.grid_h, self.grid.grid_w)


# --------------------------------------------------------------------- heads

class GlobalAttentionHead:
    """ReNet followed by a 1x1 conv to one logit per grid cell."""

    kind = "softmax"

    def __init__(self, cin, grid, hidden, rng, dtype=None):
        self.grid = grid
        self.renet = ReNet(cin, hidden, rng, dtype)
        self.proj = Conv(2 * hidden, grid.size, 1, rng, dtype=dtype)

    def params(self):
        out = {f"renet.{k}": v for k, v in self.renet.params().items()}
        out.update({f"proj.{k}": v for k, v in self.proj.params().items()})
        return out

    def logits(self, f):
        return self.proj(self.renet(f))


class LocalAttentionHead:
    """One dilated spatial conv + ReLU, then a 1x1 conv to one logit per cell."""

    def __init__(self, cin, grid, channels, rng, kernel=7, dilation=2, kind="softmax",
                 dtype=None):
        if (kernel - 1) * dilation + 1 < max(grid.span):
            raise ValueError("head receptive field smaller than the context grid")
        self.grid = grid
        self.kind = kind
        self.spatial = Conv(cin, channels, kernel, rng, dilation=dilation, dtype=dtype)
        self.proj = Conv(channels, grid.size, 1, rng, dtype=dtype)

    def params(self):
        out = {f"spatial.{k}": v for k, v in self.spatial.params().items()}
        out.update({f"proj.{k}": v for k, v in self.proj.params().items()})
        return out

    def logits(self, f):
        return self.proj(relu(self.spatial(f)))


def attention_head(f, head, grid=None, kind=None):
    grid = grid or head.grid
    kind = kind or head.kind
    x = head.logits(f)
    if x.shape[3] != grid.size:
        raise ValueError(f"head emits {x.shape[3]} channels, grid needs {grid.size}")
    if kind == "softmax":
        w = softmax(x)
    elif kind == "sigmoid":
        w = sigmoid(x)
    else:
        raise ValueError(f"unknown attention kind {kind!r}")
    return AttentionField(w, grid, kind)


# ------------------------------------------------------------- attending ops

def _local_taps(fdata, grid):
    """Zero-padded features plus one slice per grid cell, in weight order."""
    ry, rx = grid.radius
    fp = np.pad(fdata, ((0, 0), (ry, ry), (rx, rx), (0, 0)))
    h, w = fdata.shape[1:3]
    return fp, list(_tap_slices(grid.grid_h, grid.grid_w, 1, grid.dilation, h, w))


def _crop(fp, grid, h, w):
    ry, rx = grid.radius
    return fp[:, ry:ry + h, rx:rx + w, :]


def _check_field(f, att):
    n, h, w, _ = f.shape
    if att.weights.shape != (n, h, w, att.grid.size):
        raise ValueError(f"attention {att.weights.shape} does not fit features {f.shape}")
    att.grid.check(h, w)


@register
def attend_pool(f, att):
    """Attention-weighted average of the context features of every pixel."""
    _check_field(f, att)
    a = att.weights
    n, h, w, c = f.shape
    d = att.grid.size
    if att.grid.mode == "global":
        ys, xs = att.grid.source_pixels()
        src = f.data[:, ys, xs, :]
        a3 = a.data.reshape(n, h * w, d)
        out = (a3 @ src).reshape(n, h, w, c)

        def bwd(g):
            g3 = g.reshape(n, h * w, c)
            ga = (g3 @ src.transpose(0, 2, 1)).reshape(a.shape)
            gf = np.zeros_like(f.data)
            gf[:, ys, xs, :] = a3.transpose(0, 2, 1) @ g3
            return gf, ga
    else:
        fp, taps = _local_taps(f.data, att.grid)
        out = np.zeros_like(f.data)
        for i, s in enumerate(taps):
            out += a.data[..., i:i + 1] * fp[s]

        def bwd(g):
            ga = np.empty_like(a.data)
            gfp = np.zeros_like(fp)
            for i, s in enumerate(taps):
                ga[..., i] = np.einsum("nhwc,nhwc->nhw", g, fp[s])
                gfp[s] += a.data[..., i:i + 1] * g
            return _crop(gfp, att.grid, h, w), ga

    return record("attend_pool", (f, a), out, bwd)


@register
def attend_conv(f, gates, weight, bias=None):
    """Convolution whose per-tap inputs are scaled by per-pixel gates.

    ``weight`` is (grid_h, grid_w, C, C_out) with the grid's dilation;
    output keeps the input spatial size.
    """
    _check_field(f, gates)
    grid = gates.grid
    kh, kw, cin, cout = weight.shape
    if (kh, kw) != (grid.grid_h, grid.grid_w) or grid.mode != "local":
        raise ValueError(f"kernel {(kh, kw)} does not match gate grid {grid}")
    if cin != f.shape[3]:
        raise ValueError(f"input has {f.shape[3]} channels, kernel expects {cin}")
    g_t = gates.weights
    gd = g_t.data
    n, h, w, _ = f.shape
    wd = weight.data
    fp, taps = _local_taps(f.data, grid)
    out = np.zeros((n, h, w, cout), dtype=f.dtype)
    for i, s in enumerate(taps):
        out += (gd[..., i:i + 1] * fp[s]) @ wd[divmod(i, kw)]
    if bias is not None:
        out += bias.data
    inputs = (f, g_t, weight) if bias is None else (f, g_t, weight, bias)

    def bwd(g):
        g2d = g.reshape(-1, cout)
        gw = np.empty_like(wd)
        ggates = np.empty_like(gd)
        gfp = np.zeros_like(fp)
        for i, s in enumerate(taps):
            ij = divmod(i, kw)
            src = fp[s]
            gate = gd[..., i:i + 1]
            gw[ij] = (gate * src).reshape(-1, cin).T @ g2d
            back = g @ wd[ij].T
            ggates[..., i] = np.einsum("nhwc,nhwc->nhw", back, src)
            gfp[s] += gate * back
        grads = (_crop(gfp, grid, h, w), ggates, gw)
        if bias is not None:
            grads += (g2d.sum(axis=0),)
        return grads

    return record("attend_conv", inputs, out, bwd)


# --------------------------------------------------------- reference loops

def _sources(grid, y, x, height, width):
    """Yield (index, sy, sx, in_bounds) for pixel (y, x)."""
    for i in range(grid.size):
        r, c = divmod(i, grid.grid_w)
        if grid.mode == "global":
            sy, sx = r * grid.dilation, c * grid.dilation
        else:
            sy = y + (r - grid.grid_h // 2) * grid.dilation
            sx = x + (c - grid.grid_w // 2) * grid.dilation
        yield i, sy, sx, 0 <= sy < height and 0 <= sx < width


def attend_pool_reference(f, weights, grid):
    """Per-pixel gather-and-sum loop over plain arrays."""
    f = np.asarray(f)
    weights = np.asarray(weights)
    n, h, w, c = f.shape
    out = np.zeros_like(f)
    for b in range(n):
        for y in range(h):
            for x in range(w):
                acc = np.zeros(c, dtype=f.dtype)
                for i, sy, sx, ok in _sources(grid, y, x, h, w):
                    if ok:
                        acc += weights[b, y, x, i] * f[b, sy, sx]
                out[b, y, x] = acc
    return out


def attend_conv_reference(f, gates, weight, bias, grid):
    """Per-pixel sum of gate * feature * kernel tap, plus bias."""
    f = np.asarray(f)
    gates = np.asarray(gates)
    weight = np.asarray(weight)
    n, h, w, _ = f.shape
    cout = weight.shape[3]
    out = np.zeros((n, h, w, cout), dtype=f.dtype)
    for b in range(n):
        for y in range(h):
            for x in range(w):
                acc = np.zeros(cout, dtype=f.dtype)
                for i, sy, sx, ok in _sources(grid, y, x, h, w):
                    if ok:
                        r, c = divmod(i, grid.grid_w)
                        acc += gates[b, y, x, i] * (f[b, sy, sx] @ weight[r, c])
                out[b, y, x] = acc + (0 if bias is None else np.asarray(bias))
    return out


# -------------------------------------------------------------------- dumps

def dump_attention(field, batch, y, x, out_dir, stem, upscale=16):
    """Write one pixel's attention map as an 8-bit PNG plus a text sidecar.

    Weights are min-max normalized per map. Returns the PNG path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = field.grid
    m = field.maps()[batch, y, x].astype(np.float64)
    lo, hi = m.min(), m.max()
    norm = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    img = np.round(norm * 255).astype(np.uint8)
    img = np.kron(img, np.ones((upscale, upscale), dtype=np.uint8))
    png = out_dir / f"{stem}.png"
    Image.fromarray(img, mode="L").save(png)
    side = grid.describe() + (
        f"kind={field.kind}\npixel_y={y}\npixel_x={x}\n"
        f"map_h={field.shape[1]}\nmap_w={field.shape[2]}\n"
        f"weight_sum={m.sum():.6f}\nweight_min={lo:.6g}\nweight_max={hi:.6g}\n")
    (out_dir / f"{stem}.txt").write_text(side)
    return png
