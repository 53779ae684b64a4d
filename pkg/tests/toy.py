"""Desk-scale toy training shared by the acceptance tests (also runnable)."""

import json
import sys
import time
from pathlib import Path

import numpy as np

from picanet.data import synth_dataset
from picanet.train import TrainConfig, evaluate, train

# scaled-down channel plan that keeps 2k steps x 6 runs inside the time budget
LEAN = {
    "channels": [8, 16, 32, 32, 32],
    "fc_channels": 64,
    "convs_per_block": [2, 2, 2, 1, 1],
    "local_head_channels": 8,
    "renet_hidden": 16,
}

# optimizer settings for training from scratch (the library defaults are the
# fine-tuning recipe for a pretrained encoder)
RECIPE = {
    "base_lr": 0.03,
    "encoder_lr_mult": 1.0,
    "global_head_lr_mult": 10.0,
    "milestones": (0.75, 0.9),
}

SEEDS = (0, 1, 2)


def datasets(root):
    root = Path(root)
    if not (root / "train" / "manifest.json").exists():
        synth_dataset(42, 200, 64, root / "train")
    if not (root / "test" / "manifest.json").exists():
        synth_dataset(4242, 50, 64, root / "test", split="test")
    return root / "train", root / "test"


def toy_run(preset, seed, root, steps=2000, dtype="float32"):
    """Train one preset/seed and evaluate on the held-out split (cached on disk)."""
    train_dir, test_dir = datasets(root)
    out = Path(root) / f"{preset.replace('/', '_').lstrip('+')}_s{seed}"
    done = out / "result.json"
    if done.exists():
        return json.loads(done.read_text())
    cfg = TrainConfig(preset=preset, seed=seed, max_steps=steps, dtype=dtype, model=dict(LEAN),
                      **RECIPE)
    t0 = time.perf_counter()
    res = train(cfg, train_dir, out)
    secs = time.perf_counter() - t0
    rep = evaluate(out / "final.ptck", test_dir, out / "eval")
    result = {"preset": preset, "seed": seed, "steps": steps, "recipe": RECIPE,
              "train_seconds": secs, "eval_seconds": time.perf_counter() - t0 - secs,
              "maxF": rep.max_f, "MAE": rep.mae, "S_m": rep.s_m,
              "first_loss": float(res.log[0]["L_total"]), "last_loss": float(res.log[-1]["L_total"]),
              "checkpoint": str(out / "final.ptck")}
    done.write_text(json.dumps(result, indent=1))
    return result


if __name__ == "__main__":
    root, *jobs = sys.argv[1:]
    for job in jobs:
        preset, seed = job.rsplit(":", 1)
        print(json.dumps(toy_run(preset, int(seed), root)), flush=True)
