"""Saliency evaluation: PR curve, max F-measure, MAE and S-measure."""

from dataclasses import dataclass, field

import numpy as np

EPS = np.finfo(np.float64).eps

REPORT_SCHEMA = {
    "type": "object",
    "required": ["maxF", "MAE", "S_m", "pr_curve"],
    "properties": {
        "maxF": {"type": "number", "minimum": 0, "maximum": 1},
        "MAE": {"type": "number", "minimum": 0, "maximum": 1},
        "S_m": {"type": "number", "minimum": 0, "maximum": 1},
        "num_images": {"type": "integer", "minimum": 1},
        "pr_curve": {
            "type": "array", "minItems": 256, "maxItems": 256,
            "items": {"type": "array", "minItems": 2, "maxItems": 2,
                      "items": {"type": "number", "minimum": 0, "maximum": 1}},
        },
    },
}


def quantize(pred):
    """Map a saliency map to integer levels 0..255."""
    p = np.asarray(pred)
    if p.dtype == np.uint8:
        return p.astype(np.int64)
    return np.clip(np.round(p.astype(np.float64) * 255), 0, 255).astype(np.int64)


def binarize_gt(gt):
    g = np.asarray(gt)
    if g.dtype == np.uint8:
        return g >= 128
    return g >= 0.5


def to_unit(x):
    x = np.asarray(x)
    if x.dtype == np.uint8:
        return x.astype(np.float64) / 255.0
    return x.astype(np.float64)


def image_pr(pred, gt):
    """Precision and recall of one image at thresholds 0..255 (pred >= t)."""
    q = quantize(pred)
    g = binarize_gt(gt)
    if q.shape != g.shape:
        raise ValueError(f"size mismatch {q.shape} vs {g.shape}")
    fg_hist = np.bincount(q[g], minlength=256)
    bg_hist = np.bincount(q[~g], minlength=256)
    tp = np.cumsum(fg_hist[::-1])[::-1].astype(np.float64)
    fp = np.cumsum(bg_hist[::-1])[::-1].astype(np.float64)
    n_fg = float(g.sum())
    predicted = tp + fp
    precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 1.0)
    recall = tp / n_fg if n_fg > 0 else np.ones(256)
    return precision, recall


def pr_curve(preds, gts):
    """Dataset PR curve: per-image precision/recall averaged per threshold.

    Returns a (256, 2) array of (precision, recall) for thresholds 0..255.
    """
    if len(preds) == 0:
        raise ValueError("empty dataset")
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth counts differ")
    ps, rs = zip(*(image_pr(p, g) for p, g in zip(preds, gts)))
    return np.stack([np.mean(ps, axis=0), np.mean(rs, axis=0)], axis=1)


def f_measure(precision, recall, beta2=0.3):
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    den = beta2 * p + r
    return np.where(den > 0, (1 + beta2) * p * r / np.where(den > 0, den, 1), 0.0)


def max_f_measure(curve, beta2=0.3):
    curve = np.asarray(curve, dtype=np.float64).reshape(-1, 2)
    if curve.size == 0:
        raise ValueError("empty curve")
    return float(f_measure(curve[:, 0], curve[:, 1], beta2).max())


def mae(pred, gt):
    p, g = np.asarray(pred), np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"size mismatch {p.shape} vs {g.shape}")
    if p.dtype == np.uint8 and g.dtype == np.uint8:
        # integer sum, one rounding: exact for 8-bit maps
        return int(np.abs(p.astype(np.int64) - g).sum()) / (255 * p.size)
    return float(np.mean(np.abs(to_unit(g) - to_unit(p))))


# ----------------------------------------------------------------- S-measure

def _object_score(x, mask):
    vals = x[mask]
    if vals.size == 0:
        return 0.0
    mu = vals.mean()
    sigma = vals.std(ddof=1) if vals.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sigma + EPS)


def s_object(pred, gt):
    fg = np.where(gt, pred, 0.0)
    bg = np.where(gt, 0.0, 1.0 - pred)
    u = gt.mean()
    return u * _object_score(fg, gt) + (1 - u) * _object_score(bg, ~gt)


def _ssim(pred, gt):
    n = pred.size
    x, y = pred.mean(), gt.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1 + EPS)
    sy = ((gt - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1 + EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def _round(v):
    # halves round away from zero, as in the reference implementation
    return int(np.floor(v + 0.5))


def _centroid(gt):
    rows, cols = gt.shape
    total = gt.sum()
    if total == 0:
        return _round(cols / 2), _round(rows / 2)
    i = np.arange(1, cols + 1)
    j = np.arange(1, rows + 1)
    x = _round((gt.sum(axis=0) * i).sum() / total)
    y = _round((gt.sum(axis=1) * j).sum() / total)
    return x, y


def s_region(pred, gt):
    rows, cols = gt.shape
    x, y = _centroid(gt)
    area = rows * cols
    gtf = gt.astype(np.float64)
    blocks = [
        (slice(0, y), slice(0, x), x * y),
        (slice(0, y), slice(x, cols), (cols - x) * y),
        (slice(y, rows), slice(0, x), x * (rows - y)),
        (slice(y, rows), slice(x, cols), (cols - x) * (rows - y)),
    ]
    score = 0.0
    for sy, sx, size in blocks:
        if size == 0:
            continue
        score += size / area * _ssim(pred[sy, sx], gtf[sy, sx])
    return score


def s_measure(pred, gt, alpha=0.5):
    """Structure measure: equal-weight object-aware and region-aware terms."""
    p = to_unit(pred)
    g = binarize_gt(gt)
    if p.shape != g.shape:
        raise ValueError(f"size mismatch {p.shape} vs {g.shape}")
    y = g.mean()
    if y == 0:
        q = 1.0 - p.mean()
    elif y == 1:
        q = p.mean()
    else:
        q = alpha * s_object(p, g) + (1 - alpha) * s_region(p, g)
    return float(max(q, 0.0))


# -------------------------------------------------------------------- report

@dataclass
class MetricsReport:
    pr: np.ndarray
    max_f: float
    mae: float
    s_m: float
    per_image: list = field(default_factory=list)

    def summary(self):
        return {
            "maxF": round(self.max_f, 10),
            "MAE": round(self.mae, 10),
            "S_m": round(self.s_m, 10),
            "num_images": len(self.per_image),
            "pr_curve": [[round(float(p), 10), round(float(r), 10)] for p, r in self.pr],
        }


def evaluate_maps(preds, gts, names=None, beta2=0.3):
    """Metrics over paired prediction / ground-truth maps of equal size."""
    names = names or [f"{i:05d}" for i in range(len(preds))]
    curve = pr_curve(preds, gts)
    rows = []
    for name, p, g in zip(names, preds, gts):
        pp, rr = image_pr(p, g)
        rows.append({
            "image": name,
            "MAE": mae(p, g),
            "S_m": s_measure(p, g),
            "maxF": float(f_measure(pp, rr, beta2).max()),
        })
    return MetricsReport(
        pr=curve,
        max_f=max_f_measure(curve, beta2),
        mae=float(np.mean([r["MAE"] for r in rows])),
        s_m=float(np.mean([r["S_m"] for r in rows])),
        per_image=rows,
    )
