"""Batched attend_pool against the per-pixel reference loop."""

import csv
import json
import time
from pathlib import Path

import numpy as np

from .attention import AttentionField, ContextGrid, attend_pool, attend_pool_reference
from .nn import softmax
from .tensor import Tensor, no_grad


def _time(fn, warmup, trials):
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return np.array(out)


def run_bench(shape=(1, 28, 28, 64), grid=10, dilation=3, mode="global", warmup=3,
              trials=30, seed=0):
    """Time both implementations on identical inputs; returns a result dict."""
    if trials < 1 or warmup < 0:
        raise ValueError("need trials >= 1 and warmup >= 0")
    n, h, w, c = shape
    g = ContextGrid.square(grid, dilation, mode)
    g.check(h, w)
    rng = np.random.default_rng(seed)
    f = Tensor(rng.normal(size=shape))
    with no_grad():
        att = AttentionField(softmax(Tensor(rng.normal(size=(n, h, w, g.size)))), g)

    def batched():
        with no_grad():
            return attend_pool(f, att).data

    def naive():
        return attend_pool_reference(f.data, att.weights.data, g)

    diff = float(np.abs(batched() - naive()).max())
    tb = _time(batched, warmup, trials)
    tn = _time(naive, warmup, trials)
    return {
        "shape": list(shape),
        "grid": g.grid_h,
        "dilation": g.dilation,
        "mode": g.mode,
        "warmup": warmup,
        "trials": trials,
        "batched_median_s": float(np.median(tb)),
        "naive_median_s": float(np.median(tn)),
        "speedup": float(np.median(tn) / np.median(tb)),
        "max_abs_diff": diff,
        "batched_s": tb.tolist(),
        "naive_s": tn.tolist(),
    }


def write_bench(result, out_dir):
    from .plots import bench_figure

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench_trials.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["trial", "naive_s", "batched_s"])
        for i, (a, b) in enumerate(zip(result["naive_s"], result["batched_s"])):
            wr.writerow([i, repr(a), repr(b)])
    summary = {k: v for k, v in result.items() if not k.endswith("_s") or "median" in k}
    (out / "bench.json").write_text(json.dumps(summary, indent=1) + "\n")
    bench_figure({"per-pixel loop": result["naive_s"], "batched": result["batched_s"]},
                 out / "bench.svg")
    return out
