"""U-Net saliency network with attention modules in the decoder.

Encoder: a VGG-shaped stack whose top two blocks keep stride 8 through
stride-1 pooling and dilation, followed by fc6/fc7-style convs. Decoder:
six modules D6..D1, each fusing its encoder skip with the upsampled
previous decoding feature and optionally attending to context.
"""

import re
from dataclasses import asdict, dataclass

import numpy as np

from .attention import (ContextGrid, GlobalAttentionHead, LocalAttentionHead, attend_conv,
                        attend_pool, attention_head, global_grid_for)
from .nn import (BatchNorm, Conv, ReNet, avg_pool, bilinear_upsample, global_avg_pool,
                 global_max_pool, max_pool)
from .tensor import Tensor, concat, get_default_dtype, relu, sigmoid

KINDS = ("none", "gap", "lap", "ac", "renet", "lc",
         "global_avgpool", "global_maxpool", "local_avgpool", "local_maxpool")
POOL_PATH = ("gap", "lap", "renet", "global_avgpool", "global_maxpool",
             "local_avgpool", "local_maxpool")


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    channels: tuple = (16, 32, 64, 64, 64)
    fc_channels: int = 128
    convs_per_block: tuple = (2, 2, 2, 2, 2)
    fc6_dilation: int = 3
    # attention[i - 1] is the kind used in decoding module D^i
    attention: tuple = ("none",) * 6
    local_grid: int = 7
    local_dilation: int = 2
    local_head_channels: int = 16
    local_head_kernel: int = 7
    local_head_dilation: int = 2
    renet_hidden: int = 32
    global_max_grid: int = 10
    deep_supervision: tuple = (True,) * 6
    attention_loss: bool = True
    preset: str = "U-Net"

    def __post_init__(self):
        if len(self.attention) != 6:
            raise ValueError("exactly six decoding modules are required")
        for k in self.attention:
            if k not in KINDS:
                raise ValueError(f"unknown module kind {k!r}")
        if len(self.channels) != 5 or len(self.convs_per_block) != 5:
            raise ValueError("encoder needs five blocks")
        if self.input_size % 8:
            raise ValueError("input size must be divisible by 8")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("channels", "convs_per_block", "attention", "deep_supervision"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def module_sizes(self):
        s = self.input_size
        return {1: s, 2: s // 2, 3: s // 4, 4: s // 8, 5: s // 8, 6: s // 8}

    def module_channels(self):
        return {i + 1: c for i, c in enumerate(self.channels)} | {6: self.fc_channels}


FULL_PLAN = dict(input_size=224, channels=(64, 128, 256, 512, 512), fc_channels=1024,
                  convs_per_block=(2, 2, 3, 3, 3), fc6_dilation=12, local_head_channels=128,
                  renet_hidden=256)

_SEGMENT = re.compile(r"^(\d+)(GAP|LAP|AC|ReNet|LC|G|L)$")
_CODES = {"GAP": "gap", "LAP": "lap", "AC": "ac", "ReNet": "renet", "LC": "lc"}

TABLE1_PRESETS = (
    "U-Net", "+6GAP", "+6GAP_5AC", "+6GAP_54AC", "+6GAP_543AC", "+6GAP_5432AC",
    "+65432AC", "+65GAP_432AC", "+654GAP_32AC", "+6GAP_5432LAP",
    "+6GAP_5432AC_w/o_L_GA", "+6ReNet_5432LC", "+6G_5432L_AveP", "+6G_5432L_MaxP",
)


def parse_preset(name):
    """Module kinds and attention-loss flag for a Table-1 style name.

    ``"+6GAP_5432AC"`` puts GAP in D6 and AC in D5..D2; ``G``/``L`` with a
    trailing ``AveP``/``MaxP`` segment mean global/local vanilla pooling;
    a ``w/o_L_GA`` suffix disables the global attention loss.
    """
    raw = name.strip()
    if raw in ("U-Net", "UNet", "baseline"):
        return ("none",) * 6, True
    if raw.replace(" ", "_") == "w/o_L_GA":
        raw = "+6GAP_5432AC_w/o_L_GA"
    attention_loss = True
    for suffix in ("_w/o_L_GA", "_w/o_L_GA^6", "_wo_LGA"):
        if raw.endswith(suffix):
            raw = raw[: -len(suffix)]
            attention_loss = False
    if not raw.startswith("+"):
        raise ValueError(f"unrecognized preset {name!r}")
    parts = raw[1:].split("_")
    pool = None
    if parts[-1] in ("AveP", "MaxP"):
        pool = "avgpool" if parts.pop() == "AveP" else "maxpool"
    kinds = ["none"] * 6
    for part in parts:
        m = _SEGMENT.match(part)
        if not m:
            raise ValueError(f"bad preset segment {part!r} in {name!r}")
        digits, code = m.groups()
        if code in ("G", "L"):
            if pool is None:
                raise ValueError(f"{code} needs an AveP/MaxP suffix in {name!r}")
            kind = ("global_" if code == "G" else "local_") + pool
        else:
            kind = _CODES[code]
        for ch in digits:
            i = int(ch)
            if not 1 <= i <= 6 or kinds[i - 1] != "none":
                raise ValueError(f"bad module index {ch} in {name!r}")
            kinds[i - 1] = kind
    return tuple(kinds), attention_loss


def preset_config(name, **overrides):
    kinds, attention_loss = parse_preset(name)
    return ModelConfig(attention=kinds, attention_loss=attention_loss, preset=name, **overrides)


# ------------------------------------------------------------------ modules

class Encoder:
    def __init__(self, cfg, rng, dtype):
        self.blocks = []
        cin = 3
        for b, (c, n) in enumerate(zip(cfg.channels, cfg.convs_per_block), start=1):
            dil = 2 if b == 5 else 1
            convs = []
            for _ in range(n):
                convs.append(Conv(cin, c, 3, rng, dilation=dil, dtype=dtype))
                cin = c
            self.blocks.append(convs)
        self.fc6 = Conv(cin, cfg.fc_channels, 3, rng, dilation=cfg.fc6_dilation, dtype=dtype)
        self.fc7 = Conv(cfg.fc_channels, cfg.fc_channels, 1, rng, dtype=dtype)

    def params(self):
        out = {}
        for b, convs in enumerate(self.blocks, start=1):
            for j, conv in enumerate(convs):
                out.update({f"block{b}.conv{j}.{k}": v for k, v in conv.params().items()})
        out.update({f"fc6.{k}": v for k, v in self.fc6.params().items()})
        out.update({f"fc7.{k}": v for k, v in self.fc7.params().items()})
        return out

    def __call__(self, x):
        feats = []
        h = x
        for b, convs in enumerate(self.blocks, start=1):
            for conv in convs:
                pre = conv(h)
                h = relu(pre)
            feats.append(pre)
            if b <= 3:
                h = max_pool(h, 2, 2)
            else:
                h = max_pool(h, 3, 1, padding=1)
        h = relu(self.fc6(h))
        feats.append(self.fc7(h))
        return feats


@dataclass
class DecoderState:
    index: int
    en: Tensor
    dec_prev: Tensor
    fused: Tensor
    attended: Tensor
    dec: Tensor
    saliency: Tensor
    attention: object = None


class DecoderModule:
    def __init__(self, index, kind, c_in, c_out, size, cfg, rng, dtype):
        self.index = index
        self.kind = kind
        has_prev = index < 6
        self.bn_en = BatchNorm(c_in, dtype=dtype)
        self.fuse = Conv(2 * c_in if has_prev else c_in, c_in, 1, rng, dtype=dtype)
        self.grid = None
        self.head = None
        self.renet = None
        k, d = cfg.local_grid, cfg.local_dilation
        self.local_k, self.local_d = k, d
        if kind == "gap":
            self.grid = global_grid_for(size, cfg.global_max_grid)
            self.grid.check(size, size)
            self.head = GlobalAttentionHead(c_in, self.grid, cfg.renet_hidden, rng, dtype)
        elif kind in ("lap", "ac"):
            self.grid = ContextGrid.square(k, d, "local")
            self.head = LocalAttentionHead(
                c_in, self.grid, cfg.local_head_channels, rng, cfg.local_head_kernel,
                cfg.local_head_dilation, "softmax" if kind == "lap" else "sigmoid", dtype)
        elif kind == "renet":
            self.renet = ReNet(c_in, cfg.renet_hidden, rng, dtype)
        if kind in ("ac", "lc"):
            self.out_conv = Conv(c_in, c_out, k, rng, dilation=d, dtype=dtype)
        elif kind == "none":
            self.out_conv = Conv(c_in, c_out, 1, rng, dtype=dtype)
        else:
            att_ch = 2 * cfg.renet_hidden if kind == "renet" else c_in
            self.out_conv = Conv(c_in + att_ch, c_out, 1, rng, dtype=dtype)
        self.bn_out = BatchNorm(c_out, dtype=dtype)
        self.side = Conv(c_out, 1, 1, rng, dtype=dtype)

    def params(self):
        out = {}
        parts = {"bn_en": self.bn_en, "fuse": self.fuse, "out_conv": self.out_conv,
                 "bn_out": self.bn_out, "side": self.side}
        if self.head is not None:
            parts["head"] = self.head
        if self.renet is not None:
            parts["renet"] = self.renet
        for name, part in parts.items():
            out.update({f"{name}.{k}": v for k, v in part.params().items()})
        return out

    def batchnorms(self):
        return {"bn_en": self.bn_en, "bn_out": self.bn_out}

    def __call__(self, en, dec_prev, training, ac_gates=None):
        e = relu(self.bn_en(en, training))
        if dec_prev is not None:
            h, w = en.shape[1:3]
            if dec_prev.shape[1:3] != (h, w):
                dec_prev = bilinear_upsample(dec_prev, h, w)
            e = concat([e, dec_prev])
        f = relu(self.fuse(e))
        att = None
        attended = None
        kind = self.kind
        if kind in ("gap", "lap"):
            att = attention_head(f, self.head)
            attended = attend_pool(f, att)
        elif kind == "renet":
            attended = self.renet(f)
        elif kind in ("global_avgpool", "global_maxpool"):
            pooled = global_avg_pool(f) if kind == "global_avgpool" else global_max_pool(f)
            attended = bilinear_upsample(pooled, *f.shape[1:3])
        elif kind in ("local_avgpool", "local_maxpool"):
            pool = avg_pool if kind == "local_avgpool" else max_pool
            pad = (self.local_k - 1) * self.local_d // 2
            attended = pool(f, self.local_k, 1, pad, self.local_d)

        if kind == "ac":
            att = attention_head(f, self.head) if ac_gates is None else ac_gates
            pre = attend_conv(f, att, self.out_conv.weight, self.out_conv.bias)
            attended = pre
        elif kind in POOL_PATH:
            pre = self.out_conv(concat([f, attended]))
        else:
            pre = self.out_conv(f)
        dec = relu(self.bn_out(pre, training))
        s = sigmoid(self.side(dec))
        return DecoderState(self.index, en, dec_prev, f, attended, dec, s, att)


class SaliencyNet:
    def __init__(self, cfg, seed=0, init="random", dtype=None):
        self.cfg = cfg
        self.dtype = np.dtype(dtype or get_default_dtype())
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, rng, self.dtype)
        sizes = cfg.module_sizes()
        chans = cfg.module_channels()
        self.decoder = {}
        for i in range(6, 0, -1):
            c_out = chans[i - 1] if i > 1 else chans[1]
            m = DecoderModule(i, cfg.attention[i - 1], chans[i], c_out, sizes[i], cfg, rng,
                              self.dtype)
            self.decoder[i] = m
        self.training = True
        if init == "zeros":
            for p in self.params().values():
                p.data[...] = 0

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def params(self):
        out = {f"encoder.{k}": v for k, v in self.encoder.params().items()}
        for i in range(6, 0, -1):
            out.update({f"decoder.d{i}.{k}": v for k, v in self.decoder[i].params().items()})
        return out

    def buffers(self):
        out = {}
        for i in range(6, 0, -1):
            for name, bn in self.decoder[i].batchnorms().items():
                for k, v in bn.buffers().items():
                    out[f"decoder.d{i}.{name}.{k}"] = v
        return out

    def param_groups(self):
        """encoder, decoder, and the global attention heads (a subset of the decoder)."""
        groups = {"encoder": [], "decoder": [], "global_head": []}
        gap = {f"decoder.d{i}.head." for i, m in self.decoder.items() if m.kind == "gap"}
        for name, p in self.params().items():
            if name.startswith("encoder."):
                groups["encoder"].append(p)
            elif name.startswith(tuple(gap)):
                groups["global_head"].append(p)
            else:
                groups["decoder"].append(p)
        return groups

    def num_params(self):
        return int(sum(p.data.size for p in self.params().values()))

    def encode(self, image):
        if image.shape[1] % 8 or image.shape[2] % 8:
            raise ValueError(f"input size {image.shape[1:3]} not divisible by 8")
        return self.encoder(image)

    def decode_step(self, i, en, dec_prev):
        return self.decoder[i](en, dec_prev, self.training)

    def forward(self, image):
        """Run the full network; returns a ForwardResult."""
        if not isinstance(image, Tensor):
            image = Tensor(image, dtype=self.dtype)
        en = self.encode(image)
        states = {}
        dec = None
        for i in range(6, 0, -1):
            st = self.decode_step(i, en[i - 1], dec)
            states[i] = st
            dec = st.dec
        return ForwardResult(en, states)

    __call__ = forward


@dataclass
class ForwardResult:
    encoder: list
    states: dict

    @property
    def saliency(self):
        """[S^1, ..., S^6]."""
        return [self.states[i].saliency for i in range(1, 7)]

    @property
    def attention(self):
        return {i: st.attention for i, st in self.states.items() if st.attention is not None}
