"""Report figures rendered to files with a non-interactive backend."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import f_measure  # noqa: E402


def pr_curve_figure(curve, path, max_f=None, label=None):
    curve = np.asarray(curve)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot(curve[:, 1], curve[:, 0], lw=1.5, label=label or "model")
    if max_f is not None:
        best = int(np.argmax(f_measure(curve[:, 0], curve[:, 1])))
        ax.plot(curve[best, 1], curve[best, 0], "o", ms=5,
                label=f"max F = {max_f:.4f} (t = {best})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.01)
    ax.set_ylim(0, 1.01)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(path))
    plt.close(fig)
    return path


def loss_curve_figure(rows, path):
    """Total and per-term losses from training-log rows (dicts of strings)."""
    steps = np.array([int(r["step"]) for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ["L_total"] + [f"L_S{i}" for i in range(1, 7)] + ["L_GA"]:
        vals = [r[key] for r in rows]
        if not vals or any(v == "" for v in vals):
            continue
        lw = 1.6 if key == "L_total" else 0.8
        ax.plot(steps, np.array(vals, dtype=float), lw=lw, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(Path(path))
    plt.close(fig)
    return path


def bench_figure(times, path):
    """Box plot of per-trial timings, ``times`` maps label to seconds."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    labels = list(times)
    ax.boxplot([np.asarray(times[k]) * 1e3 for k in labels])
    ax.set_xticks(range(1, len(labels) + 1), labels)
    ax.set_ylabel("ms per call")
    ax.set_yscale("log")
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(Path(path))
    plt.close(fig)
    return path
