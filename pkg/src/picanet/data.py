"""Synthetic saliency data, dataset manifests, image IO and augmentation."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .nn import resize_array

SHAPES = ("ellipse", "rectangle", "triangle")


@dataclass
class DatasetManifest:
    pairs: list
    split: str = "train"
    generator: dict = None
    root: Path = field(default=None, repr=False)

    def __len__(self):
        return len(self.pairs)

    def paths(self):
        root = Path(self.root or ".")
        return [(root / img, root / mask) for img, mask in self.pairs]

    def to_json(self):
        return {"split": self.split, "pairs": [list(p) for p in self.pairs],
                "generator": self.generator}

    def save(self, path):
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path):
        """Read a manifest JSON, or scan a directory with images/ and masks/."""
        path = Path(path)
        if path.is_dir():
            if (path / "manifest.json").exists():
                return cls.load(path / "manifest.json")
            imgs = sorted((path / "images").glob("*.png"))
            pairs = [(f"images/{p.name}", f"masks/{p.name}") for p in imgs]
            m = cls(pairs, split=path.name, root=path)
        else:
            d = json.loads(path.read_text())
            m = cls([tuple(p) for p in d["pairs"]], d.get("split", "train"),
                    d.get("generator"), root=path.parent)
        m.validate()
        return m

    def validate(self):
        if not self.pairs:
            raise ValueError("manifest has no image/mask pairs")
        for img, mask in self.paths():
            for p in (img, mask):
                if not p.exists():
                    raise FileNotFoundError(p)

    def load_arrays(self):
        """Images as float (H, W, 3) in [0, 1] and masks as float (H, W)."""
        images, masks = [], []
        for img, mask in self.paths():
            im = read_image(img)
            mk = read_mask(mask)
            if im.shape[:2] != mk.shape:
                raise ValueError(f"{img} and {mask} differ in size")
            images.append(im)
            masks.append(mk)
        return images, masks


def read_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_mask(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_gray(path, arr):
    """Save a [0, 1] map as an 8-bit grayscale PNG."""
    q = np.clip(np.round(np.asarray(arr, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="L").save(path)


# --------------------------------------------------------------- synthesis

def _smooth_noise(rng, size, cells, amp):
    coarse = rng.standard_normal((1, cells, cells, 3))
    return resize_array(coarse, size, size)[0] * amp


def _shape_mask(rng, size):
    kind = SHAPES[rng.integers(len(SHAPES))]
    img = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(img)
    cx, cy = rng.uniform(0.15, 0.85, 2) * size
    rx, ry = rng.uniform(0.08, 0.3, 2) * size
    if kind == "ellipse":
        draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)
    elif kind == "rectangle":
        draw.rectangle([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)
    else:
        ang = rng.uniform(0, 2 * np.pi) + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3])
        pts = [(cx + rx * 1.3 * np.cos(a), cy + ry * 1.3 * np.sin(a)) for a in ang]
        draw.polygon(pts, fill=255)
    return np.asarray(img) > 127


def _distinct_color(rng, avoid, min_dist=0.35):
    while True:
        c = rng.uniform(0.05, 0.95, 3)
        if all(np.linalg.norm(c - a) >= min_dist for a in avoid):
            return c


def synth_sample(rng, size, fg_range=(0.02, 0.6)):
    """One image (size, size, 3) uint8 and its {0, 255} mask."""
    while True:
        n_shapes = int(rng.integers(1, 4))
        shapes = [_shape_mask(rng, size) for _ in range(n_shapes)]
        mask = np.logical_or.reduce(shapes)
        frac = mask.mean()
        if fg_range[0] < frac < fg_range[1]:
            break
    bg_color = rng.uniform(0.1, 0.9, 3)
    img = bg_color + _smooth_noise(rng, size, 6, 0.08) + rng.normal(0, 0.04, (size, size, 3))
    used = [bg_color]
    for shp in shapes:
        color = _distinct_color(rng, used)
        used.append(color)
        tex = color + _smooth_noise(rng, size, 8, 0.05) + rng.normal(0, 0.03, (size, size, 3))
        img = np.where(shp[..., None], tex, img)
    img = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return img, (mask * 255).astype(np.uint8)


def synth_dataset(seed, n, size, out_dir, split="train"):
    """Write ``n`` synthetic image/mask pairs plus a manifest under ``out_dir``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if size % 8:
        raise ValueError("size must be divisible by 8")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        img, mask = synth_sample(rng, size)
        name = f"{i:05d}.png"
        Image.fromarray(img, mode="RGB").save(out / "images" / name)
        Image.fromarray(mask, mode="L").save(out / "masks" / name)
        pairs.append((f"images/{name}", f"masks/{name}"))
    gen = {"seed": seed, "count": n, "canvas": size, "shapes": list(SHAPES)}
    manifest = DatasetManifest(pairs, split, gen, root=out)
    manifest.save(out / "manifest.json")
    return manifest


# ------------------------------------------------------------ augmentation

def resize_stack(arrs, size):
    """Bilinear-resize a list of (H, W[, C]) arrays to (n, size, size, C)."""
    out = []
    for a in arrs:
        a = a[..., None] if a.ndim == 2 else a
        out.append(resize_array(a[None], size, size)[0])
    return np.stack(out)


class Augmenter:
    """Random mirror-flip and crop after a fixed up-resize.

    Images and masks are resized once to ``round(crop * scale)``; each
    batch draws identical flip and crop parameters for image and mask.
    """

    def __init__(self, images, masks, crop, scale=8 / 7):
        self.crop = crop
        self.big = int(round(crop * scale))
        self.images = resize_stack(images, self.big)
        self.masks = resize_stack(masks, self.big)[..., 0]

    def __len__(self):
        return len(self.images)

    def batch(self, rng, size):
        idx = rng.integers(0, len(self.images), size)
        flips = rng.random(size) < 0.5
        offs = rng.integers(0, self.big - self.crop + 1, (size, 2))
        xs, ms = [], []
        for i, f, (oy, ox) in zip(idx, flips, offs):
            im = self.images[i, oy:oy + self.crop, ox:ox + self.crop]
            mk = self.masks[i, oy:oy + self.crop, ox:ox + self.crop]
            if f:
                im, mk = im[:, ::-1], mk[:, ::-1]
            xs.append(im)
            ms.append(mk)
        return np.stack(xs), np.stack(ms), (idx, flips, offs)


def normalize(images):
    """Center images in [0, 1] around zero."""
    return (np.asarray(images) - 0.5) / 0.25
