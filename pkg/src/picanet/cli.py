"""Command line entry point: synth, train, eval, infer, bench, gradcheck."""

import argparse
import json
import sys
from pathlib import Path

from .train import ConfigError, TrainingDiverged

EXIT_OK, EXIT_CONFIG, EXIT_NAN = 0, 2, 3


def _pixel(text):
    try:
        y, x = (int(v) for v in text.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"pixel must be y,x (got {text!r})") from e
    return y, x


def build_parser():
    p = argparse.ArgumentParser(prog="picanet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic image/mask dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--split", default="train")

    t = sub.add_parser("train", help="train a preset on a dataset")
    t.add_argument("--data", required=True, help="manifest.json or dataset directory")
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="TOML key-value file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--every", type=int, default=50, help="progress print interval")

    e = sub.add_parser("eval", help="metrics of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)

    i = sub.add_parser("infer", help="saliency map and attention dumps for one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--dump-attention", nargs="*", type=_pixel, default=[], metavar="Y,X")

    b = sub.add_parser("bench", help="batched vs per-pixel attend_pool timing")
    b.add_argument("--out")
    b.add_argument("--trials", type=int, default=30)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--size", type=int, default=28)
    b.add_argument("--channels", type=int, default=64)
    b.add_argument("--grid", type=int, default=10)
    b.add_argument("--dilation", type=int, default=3)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--case", action="append", help="restrict to named cases ('model' included)")
    g.add_argument("--out", help="write a CSV of per-case errors")
    return p


def cmd_synth(a):
    from .data import synth_dataset

    m = synth_dataset(a.seed, a.n, a.size, a.out, a.split)
    print(f"wrote {len(m)} pairs to {a.out}")


def cmd_train(a):
    from .config import train_config
    from .plots import loss_curve_figure
    from .train import train

    cfg = train_config(a.config, a.set)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")

    def progress(step, lr, loss):
        if a.every and (step % a.every == 0 or step == cfg.max_steps - 1):
            print(f"step {step:6d}  lr {lr:.2e}  loss {loss:.5f}", flush=True)

    res = train(cfg, a.data, out, progress)
    if res.log:
        loss_curve_figure(res.log, out / "loss_curve.png")
    print(f"log {res.log_path}; checkpoint {res.checkpoints[-1]}")


def cmd_eval(a):
    from .train import evaluate

    rep = evaluate(a.checkpoint, a.data, a.out)
    s = rep.summary()
    print(f"maxF {s['maxF']:.4f}  MAE {s['MAE']:.4f}  S_m {s['S_m']:.4f}  ({s['num_images']} images)")


def cmd_infer(a):
    from .train import infer

    for p in infer(a.checkpoint, a.image, a.out, a.dump_attention):
        print(p)


def cmd_bench(a):
    from .bench import run_bench, write_bench

    r = run_bench((1, a.size, a.size, a.channels), a.grid, a.dilation,
                  warmup=a.warmup, trials=a.trials)
    if a.out:
        write_bench(r, a.out)
    print(f"per-pixel {r['naive_median_s'] * 1e3:.2f} ms  batched {r['batched_median_s'] * 1e3:.3f} ms"
          f"  speedup {r['speedup']:.1f}x  (median of {r['trials']}, max |diff| {r['max_abs_diff']:.1e})")


def cmd_gradcheck(a):
    from .gradcheck import TOL, run_suite

    def log(name, err):
        print(f"{name:32s} {err:.3e}  {'ok' if err < TOL else 'FAIL'}", flush=True)

    res, secs = run_suite(a.seeds, a.case, log=log)
    if a.out:
        Path(a.out).write_text("case,max_rel_error\n" + "".join(f"{k},{v!r}\n" for k, v in res.items()))
    bad = [k for k, v in res.items() if not v < TOL]
    print(f"{len(res) - len(bad)}/{len(res)} cases below {TOL:g} in {secs:.1f} s")
    return 1 if bad else 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "bench": cmd_bench, "gradcheck": cmd_gradcheck}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args) or EXIT_OK
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NAN
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
