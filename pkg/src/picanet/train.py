"""Training loop, checkpoint container, evaluation and inference."""

import csv
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .attention import dump_attention
from .data import Augmenter, DatasetManifest, normalize, read_image, resize_stack, write_gray
from .losses import LossWeights, binarize_for_attention, network_loss
from .metrics import evaluate_maps
from .model import ModelConfig, SaliencyNet, preset_config
from .nn import resize_array
from .tensor import Graph, backward, no_grad, tensor_from_bytes, tensor_to_bytes

LOG_COLUMNS = ["step", "lr", "L_total"] + [f"L_S{i}" for i in range(1, 7)] + ["L_GA"]
CKPT_MAGIC = b"PCKP"
CKPT_VERSION = 1


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step, terms):
        self.step = step
        self.terms = terms
        super().__init__(f"non-finite loss at step {step}: {terms}")


@dataclass
class TrainConfig:
    preset: str = "+6GAP_5432AC"
    input_size: int = 64
    batch_size: int = 4
    base_lr: float = 0.01
    encoder_lr_mult: float = 0.1
    global_head_lr_mult: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    max_steps: int = 2000
    milestones: tuple = (0.5, 0.75)
    decay: float = 0.1
    loss_saliency: tuple = (1.0, 0.8, 0.8, 0.5, 0.5, 0.5)
    loss_attention: float = 0.2
    seed: int = 0
    dtype: str = "float64"
    # extra ModelConfig fields (channels, fc_channels, ...) applied after the preset
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        self.loss_saliency = tuple(self.loss_saliency)
        if self.batch_size < 1 or self.max_steps < 0:
            raise ConfigError("batch_size must be >= 1 and max_steps >= 0")
        if self.base_lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError("bad learning rate or momentum")
        if any(not 0 < m <= 1 for m in self.milestones):
            raise ConfigError("milestones are fractions of max_steps in (0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        try:
            self.model_config()
            self.loss_weights()
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from e

    def model_config(self):
        return preset_config(self.preset, input_size=self.input_size, **self.model)

    def loss_weights(self):
        return LossWeights(self.loss_saliency, self.loss_attention)

    def milestone_steps(self):
        return sorted({int(round(m * self.max_steps)) for m in self.milestones})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)


def learning_rate(cfg, step):
    """Base LR after multistep decay at ``step`` (0-based)."""
    n = sum(step >= m for m in cfg.milestone_steps())
    return cfg.base_lr * cfg.decay ** n


class SGD:
    """Momentum SGD in the v = mu*v + lr*(g + wd*w); w -= v form."""

    def __init__(self, groups, momentum, weight_decay, lr_mult):
        self.groups = groups
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_mult = lr_mult
        self.velocity = {p.id: np.zeros_like(p.data) for ps in groups.values() for p in ps}

    def step(self, lr):
        for name, ps in self.groups.items():
            glr = lr * self.lr_mult.get(name, 1.0)
            for p in ps:
                g = p.grad if p.grad is not None else 0.0
                v = self.velocity[p.id]
                v *= self.momentum
                v += glr * (g + self.weight_decay * p.data)
                p.data -= v


# ---------------------------------------------------------------- checkpoint

def save_checkpoint(path, model, step=0, train_config=None, rng_state=None):
    """Header JSON + name index, followed by serialized tensors."""
    named = [(f"param.{k}", v.data) for k, v in model.params().items()]
    named += [(f"buffer.{k}", v) for k, v in model.buffers().items()]
    blobs, index, offset = [], {}, 0
    for name, arr in named:
        b = tensor_to_bytes(arr)
        index[name] = {"offset": offset, "length": len(b), "shape": list(arr.shape)}
        blobs.append(b)
        offset += len(b)
    header = {
        "model_config": model.cfg.to_dict(),
        "dtype": str(model.dtype),
        "step": int(step),
        "rng_state": rng_state,
        "train_config": train_config,
        "index": index,
    }
    hb = json.dumps(header, indent=1, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hb)))
        f.write(hb)
        for b in blobs:
            f.write(b)
    return path


def read_checkpoint(path):
    """Returns (header, {name: array})."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack_from("<IQ", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    start = 16
    header = json.loads(buf[start:start + hlen])
    base = start + hlen
    arrays = {}
    for name, e in header["index"].items():
        arr, used = tensor_from_bytes(buf, base + e["offset"])
        if used != e["length"]:
            raise ValueError(f"corrupt entry {name}")
        arrays[name] = arr.reshape(e["shape"])
    return header, arrays


def load_checkpoint(path, expect=None):
    """Rebuild the model stored in a checkpoint; returns (model, header).

    ``expect`` is an optional ModelConfig that must match the stored one.
    """
    header, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model_config"])
    if expect is not None and expect != cfg:
        raise ConfigError("model config does not match checkpoint")
    model = SaliencyNet(cfg, init="zeros", dtype=header["dtype"])
    params, buffers = model.params(), model.buffers()
    if set(arrays) != {f"param.{k}" for k in params} | {f"buffer.{k}" for k in buffers}:
        raise ConfigError("checkpoint tensors do not match the model layout")
    for k, p in params.items():
        p.data[...] = arrays[f"param.{k}"]
    for k, b in buffers.items():
        b[...] = arrays[f"buffer.{k}"]
    return model.eval(), header


# ----------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: SaliencyNet
    log: list
    checkpoints: list
    log_path: Path = None


def _fmt(v):
    return "" if v is None else repr(float(v))


def train(cfg, data, out_dir, progress=None):
    """Train from scratch; writes train_log.csv and step checkpoints to ``out_dir``."""
    if not isinstance(data, DatasetManifest):
        data = DatasetManifest.load(data)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(cfg.dtype)
    mcfg = cfg.model_config()
    weights = cfg.loss_weights()
    model = SaliencyNet(mcfg, seed=cfg.seed, dtype=dtype).train()
    rng = np.random.default_rng(cfg.seed + 1)
    images, masks = data.load_arrays()
    aug = Augmenter(images, masks, cfg.input_size)
    opt = SGD(model.param_groups(), cfg.momentum, cfg.weight_decay,
              {"encoder": cfg.encoder_lr_mult, "decoder": 1.0,
               "global_head": cfg.global_head_lr_mult})
    milestones = set(cfg.milestone_steps())
    log_path = out / "train_log.csv"
    rows, ckpts = [], []

    def checkpoint(step):
        p = save_checkpoint(out / f"ckpt_step{step:06d}.ptck", model, step,
                            cfg.to_dict(), rng.bit_generator.state)
        ckpts.append(p)

    with open(log_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOG_COLUMNS)
        if cfg.max_steps == 0:
            checkpoint(0)
        for step in range(cfg.max_steps):
            lr = learning_rate(cfg, step)
            x, m, _ = aug.batch(rng, cfg.batch_size)
            x = normalize(x).astype(dtype)
            with Graph() as g:
                res = model(x)
                total, terms = network_loss(res, m, mcfg, weights)
            vals = {k: (None if t is None else t.item()) for k, t in terms.items()}
            if not np.isfinite(total.item()):
                raise TrainingDiverged(step, vals)
            backward(g, total, wrt=list(model.params().values()))
            opt.step(lr)
            row = [str(step), repr(lr), _fmt(total.item())]
            row += [_fmt(vals[f"L_S{i}"]) for i in range(1, 7)] + [_fmt(vals["L_GA"])]
            writer.writerow(row)
            rows.append(dict(zip(LOG_COLUMNS, row)))
            if progress is not None:
                progress(step, lr, total.item())
            done = step + 1
            if done in milestones or done == cfg.max_steps:
                checkpoint(done)
    final = out / "final.ptck"
    if ckpts:
        final.write_bytes(Path(ckpts[-1]).read_bytes())
        ckpts.append(final)
    return TrainResult(model.eval(), rows, ckpts, log_path)


def read_log(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# --------------------------------------------------------------- inference

def predict(model, images, batch=8):
    """S^1 maps resized back to each image's original size."""
    size = model.cfg.input_size
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            chunk = images[i:i + batch]
            x = normalize(resize_stack(chunk, size)).astype(model.dtype)
            s1 = model(x).states[1].saliency.data.astype(np.float64)
            for img, s in zip(chunk, s1):
                h, w = img.shape[:2]
                out.append(np.clip(resize_array(s[None], h, w)[0, ..., 0], 0, 1))
    return out


def attention_probe(model, images, masks, per_image=10, seed=0):
    """How often the global attention of the deepest module favors the other region.

    Samples up to ``per_image`` foreground and background pixels per image on
    the attention map's own grid. A foreground pixel counts as a hit when
    its attention mass on background cells exceeds the mass on foreground
    cells; background pixels the other way round. Images whose mask is all
    foreground or all background at that resolution are skipped.
    """
    deepest = len(model.cfg.attention)
    if model.cfg.attention[-1] != "gap":
        raise ValueError("model has no global attention pooling at the deepest module")
    rng = np.random.default_rng(seed)
    size = model.cfg.input_size
    model.eval()
    hits = {"fg": [], "bg": []}
    with no_grad():
        for i in range(0, len(images), 8):
            x = normalize(resize_stack(images[i:i + 8], size)).astype(model.dtype)
            att = model(x).attention[deepest]
            mh = att.shape[1]
            g6 = binarize_for_attention(resize_stack(masks[i:i + 8], size)[..., 0], mh)
            ys, xs = att.grid.source_pixels()
            w = att.weights.data.astype(np.float64)
            for b in range(len(w)):
                if g6[b].all() or not g6[b].any():
                    continue
                cell_fg = g6[b, ys, xs] > 0.5
                for region, flag in (("fg", True), ("bg", False)):
                    py, px = np.nonzero((g6[b] > 0.5) == flag)
                    pick = rng.choice(len(py), min(per_image, len(py)), replace=False)
                    for k in pick:
                        wp = w[b, py[k], px[k]]
                        on_fg, on_bg = wp[cell_fg].sum(), wp[~cell_fg].sum()
                        hits[region].append(on_bg > on_fg if flag else on_fg > on_bg)
    return {"fg_rate": float(np.mean(hits["fg"])), "bg_rate": float(np.mean(hits["bg"])),
            "fg_pixels": len(hits["fg"]), "bg_pixels": len(hits["bg"])}


def evaluate(checkpoint, data, out_dir=None, expect=None):
    """Metrics of a checkpoint on a dataset; optionally writes CSV, JSON and PR plot."""
    model, _ = load_checkpoint(checkpoint, expect)
    if not isinstance(data, DatasetManifest):
        data = DatasetManifest.load(data)
    images, masks = data.load_arrays()
    preds = predict(model, images)
    names = [Path(p).stem for p, _ in data.pairs]
    report = evaluate_maps(preds, masks, names)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report, out_dir):
    from .plots import pr_curve_figure

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "per_image.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["image", "maxF", "MAE", "S_m"])
        w.writeheader()
        for r in report.per_image:
            w.writerow({k: (r[k] if k == "image" else repr(r[k])) for k in w.fieldnames})
    (out / "metrics.json").write_text(json.dumps(report.summary(), indent=1) + "\n")
    pr_curve_figure(report.pr, out / "pr_curve.svg", max_f=report.max_f)
    return out


def infer(checkpoint, image_path, out_dir, pixels=(), upscale=16):
    """Write the saliency PNG and per-pixel attention dumps; returns written paths.

    ``pixels`` are (y, x) in original image coordinates.
    """
    model, _ = load_checkpoint(checkpoint)
    img = read_image(image_path)
    h, w = img.shape[:2]
    for y, x in pixels:
        if not (0 <= y < h and 0 <= x < w):
            raise ValueError(f"pixel ({y}, {x}) outside the {h}x{w} image")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    size = model.cfg.input_size
    with no_grad():
        res = model(normalize(resize_stack([img], size)).astype(model.dtype))
    s1 = res.states[1].saliency.data.astype(np.float64)
    sal = np.clip(resize_array(s1, h, w)[0, ..., 0], 0, 1)
    stem = Path(image_path).stem
    paths = [out / f"{stem}_saliency.png"]
    write_gray(paths[0], sal)
    for i, att in sorted(res.attention.items(), reverse=True):
        mh, mw = att.shape[1:3]
        kind = model.cfg.attention[i - 1]
        for y, x in pixels:
            yy, xx = min(y * mh // h, mh - 1), min(x * mw // w, mw - 1)
            name = f"{stem}_D{i}_{kind}_y{y}_x{x}"
            paths.append(dump_attention(att, 0, yy, xx, out, name, upscale))
    return paths
