"""Deep-supervision saliency loss, global attention targets and KL loss."""

from dataclasses import dataclass

import numpy as np

from .nn import resize_array
from .tensor import Tensor, add, record, register, scale

CE_CLAMP = 1e-7
KL_CLAMP = 1e-8


@dataclass(frozen=True)
class LossWeights:
    # saliency[i - 1] weights the side output of module D^i
    saliency: tuple = (1.0, 0.8, 0.8, 0.5, 0.5, 0.5)
    attention: float = 0.2

    def __post_init__(self):
        if len(self.saliency) != 6:
            raise ValueError("need six saliency weights")
        if min(self.saliency) < 0 or self.attention < 0:
            raise ValueError("loss weights must be non-negative")


@register
def saliency_ce(s, target):
    """Mean binary cross-entropy of probabilities ``s`` against ``target``."""
    t = np.asarray(target, dtype=s.dtype)
    if t.shape != s.shape:
        raise ValueError(f"target {t.shape} does not match prediction {s.shape}")
    inside = (s.data >= CE_CLAMP) & (s.data <= 1 - CE_CLAMP)
    p = np.clip(s.data, CE_CLAMP, 1 - CE_CLAMP)
    n = s.data.size
    val = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))

    def bwd(g):
        return (g.reshape(()) * inside * (-(t / p) + (1 - t) / (1 - p)) / n,)

    return record("saliency_ce", (s,), np.array(val, dtype=s.dtype).reshape(1, 1, 1, 1), bwd)


def saliency_ce_loss(s, gt):
    """Cross-entropy of side output ``s`` (n, h, w, 1) against a full-size map.

    ``gt`` (n, H, W) or (n, H, W, 1) in [0, 1] is bilinearly resized to
    the side output's size first.
    """
    g = np.asarray(gt, dtype=np.float64)
    if g.ndim == 3:
        g = g[..., None]
    h, w = s.shape[1:3]
    if g.shape[1:3] != (h, w):
        g = resize_array(g, h, w)
    return saliency_ce(s, g)


@dataclass
class GroundTruthAttention:
    targets: np.ndarray  # (n, h, w, D)
    valid: np.ndarray  # (n, h, w) pixels with a usable target
    degenerate: np.ndarray  # (n,) all-foreground or all-background samples


def binarize_for_attention(gt, size):
    """Resize a full-size mask to ``size`` x ``size`` and threshold at 0.5."""
    g = np.asarray(gt, dtype=np.float64)
    if g.ndim == 3:
        g = g[..., None]
    if g.shape[1:3] != (size, size):
        g = resize_array(g, size, size)
    return (g[..., 0] >= 0.5).astype(np.float64)


def ground_truth_attention(g6, grid):
    """Per-pixel target distributions over the global grid.

    Background pixels attend to the foreground, foreground pixels to the
    background; each target is read at the grid's source pixels and
    renormalized. Samples with an empty foreground or background are
    flagged degenerate and get no targets.
    """
    g6 = np.asarray(g6, dtype=np.float64)
    if g6.ndim == 2:
        g6 = g6[None]
    n, h, w = g6.shape
    ys, xs = grid.source_pixels()
    d = grid.size
    targets = np.zeros((n, h, w, d))
    valid = np.zeros((n, h, w), dtype=bool)
    degenerate = np.zeros(n, dtype=bool)
    for b in range(n):
        fg = g6[b]
        bg = 1.0 - fg
        if fg.sum() == 0 or bg.sum() == 0:
            degenerate[b] = True
            continue
        for is_fg, source in ((False, fg), (True, bg)):
            sampled = source[ys, xs]
            mass = sampled.sum()
            if mass == 0:
                continue
            where = fg == 1 if is_fg else fg == 0
            targets[b][where] = sampled / mass
            valid[b][where] = True
    return GroundTruthAttention(targets, valid, degenerate)


@register
def kl_attention(alpha, targets, mask):
    """Mean over masked pixels of KL(target || alpha)."""
    a = np.asarray(targets, dtype=alpha.dtype)
    m = np.asarray(mask, dtype=bool)
    count = int(m.sum())
    if count == 0:
        return record("kl_attention", (alpha,), np.zeros((1, 1, 1, 1), alpha.dtype),
                      lambda g: (np.zeros_like(alpha.data),))
    q = np.maximum(alpha.data, KL_CLAMP)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0, a * (np.log(np.where(a > 0, a, 1)) - np.log(q)), 0.0)
    val = terms.sum(axis=-1)[m].sum() / count

    def bwd(g):
        ga = np.where(alpha.data >= KL_CLAMP, -a / q, 0.0) * m[..., None]
        return (g.reshape(()) * ga / count,)

    return record("kl_attention", (alpha,), np.array(val, dtype=alpha.dtype).reshape(1, 1, 1, 1),
                  bwd)


def global_attention_loss(att, gt):
    if att.kind != "softmax":
        raise ValueError("attention loss needs softmax weights")
    if att.weights.shape != gt.targets.shape:
        raise ValueError(f"grid mismatch {att.weights.shape} vs {gt.targets.shape}")
    mask = gt.valid & ~gt.degenerate[:, None, None]
    return kl_attention(att.weights, gt.targets, mask)


def total_loss(saliency_losses, attention_loss, weights):
    """Weighted sum of the six side-output losses and the attention loss."""
    total = None
    for gamma, term in zip(weights.saliency, saliency_losses):
        if term is None:
            continue
        part = scale(term, gamma)
        total = part if total is None else add(total, part)
    if attention_loss is not None:
        part = scale(attention_loss, weights.attention)
        total = part if total is None else add(total, part)
    if total is None:
        total = Tensor(np.zeros((1, 1, 1, 1)))
    return total


def network_loss(result, masks, cfg, weights):
    """All loss terms for one forward pass; returns (total, terms dict).

    ``masks`` is (n, H, W) in [0, 1] at input resolution.
    """
    terms = {}
    side = []
    for i in range(1, 7):
        if cfg.deep_supervision[i - 1]:
            side.append(saliency_ce_loss(result.states[i].saliency, masks))
        else:
            side.append(None)
        terms[f"L_S{i}"] = side[-1]
    la = None
    att = result.states[6].attention
    if cfg.attention_loss and cfg.attention[5] == "gap" and weights.attention > 0:
        g6 = binarize_for_attention(masks, att.weights.shape[1])
        la = global_attention_loss(att, ground_truth_attention(g6, att.grid))
    terms["L_GA"] = la
    return total_loss(side, la, weights), terms
