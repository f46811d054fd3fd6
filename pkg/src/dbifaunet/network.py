"""Densely nested U-shaped backbone with DDFD/BIAF on every nested node.

Node ``X[i][j]`` sits at encoder level ``i`` (resolution ``H / 2**i``, width
``base * 2**i``) and decoder column ``j``. Column 0 is the encoder. Every node
with ``j >= 1`` receives the same-row predecessors ``X[i][0..j-1]`` and the
upsampled node below, ``X[i+1][j-1]``, as in UNet++.

In the full variant a nested node builds the triple fed to DDFD as

* deep    = ``X[i+1][j-1]`` (the node below, half resolution, twice the width),
* shallow = ``X[i-1][0]`` (the encoder peer one level up); on the top row it is
  a 3x3 conv + ReLU stem over the input image,
* current = 1x1 projection of the UNet++ concatenation for that node.

This assignment of interior triples is our reading; only the outermost row of
the design is drawn explicitly. The BIAF output is added to ``current`` before
the node's conv block, so the block always sees the aggregated skip features.
"""

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .biaf import BIAF
from .ddfd import DDFD
from .errors import ConfigError, ValidationError

ABLATIONS = ("full", "no_ddfd_biaf", "no_nested_ds")
_ABLATION_ALIASES = {"no-ddfd-biaf": "no_ddfd_biaf", "no-ds": "no_nested_ds", "no_ds": "no_nested_ds",
                     "no-nested-ds": "no_nested_ds"}


def normalize_ablation(name):
    return _ABLATION_ALIASES.get(name, name)


@dataclass
class NetworkConfig:
    depth: int = 5
    base_channels: int = 32
    input_channels: int = 1
    fusion_mode: str = "add"
    ablation: str = "full"
    heads: int = 1
    dynamic_kernels: int = 4
    max_attention_tokens: int = 256

    def __post_init__(self):
        self.ablation = normalize_ablation(self.ablation)
        self.validate()

    def validate(self):
        if self.depth < 3:
            raise ConfigError("depth", f"must be >= 3, got {self.depth}")
        if self.base_channels < 8:
            raise ConfigError("base_channels", f"must be >= 8, got {self.base_channels}")
        if self.input_channels < 1:
            raise ConfigError("input_channels", f"must be >= 1, got {self.input_channels}")
        if self.fusion_mode not in ("add", "mul"):
            raise ConfigError("fusion_mode", f"must be add or mul, got {self.fusion_mode!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError("ablation", f"must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.heads < 1 or self.base_channels % self.heads:
            raise ConfigError("heads", f"must divide base_channels, got {self.heads}")
        if self.dynamic_kernels < 1:
            raise ConfigError("dynamic_kernels", f"must be >= 1, got {self.dynamic_kernels}")
        if self.max_attention_tokens < 1:
            raise ConfigError("max_attention_tokens", "must be >= 1")

    def to_dict(self):
        return asdict(self)

    @property
    def divisor(self):
        return 2 ** (self.depth - 1)

    def width(self, level):
        return self.base_channels * 2 ** level


@dataclass
class SupervisionOutputs:
    u_heads: list = field(default_factory=list)
    b_heads: list = field(default_factory=list)

    @property
    def final(self):
        return self.u_heads[-1]

    def maps(self):
        return list(self.u_heads) + list(self.b_heads)


class ConvUnit(nn.Sequential):
    def __init__(self, cin, cout, stride=1):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class ConvBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.unit1 = ConvUnit(cin, cout)
        self.unit2 = ConvUnit(cout, cout)

    def forward(self, x):
        return self.unit2(self.unit1(x))


class SupervisionHead(nn.Module):
    """3x3 conv -> ReLU -> 1x1 conv -> sigmoid, resized to the input grid."""

    def __init__(self, channels):
        super().__init__()
        self.conv3 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv1 = nn.Conv2d(channels, 1, 1)

    def forward(self, x, size=None):
        p = torch.sigmoid(self.conv1(F.relu(self.conv3(x))))
        if size is not None and tuple(p.shape[-2:]) != tuple(size):
            p = F.interpolate(p, size=size, mode="bilinear", align_corners=False)
        return p


class PlainNode(nn.Module):
    """UNet++ node: concatenation followed by a conv block."""

    def __init__(self, cin, cout):
        super().__init__()
        self.block = ConvBlock(cin, cout)

    def forward(self, row, below, shallow):
        tap = self.block.unit1(torch.cat(row + [below], dim=1))
        return self.block.unit2(tap), tap


class FusionNode(nn.Module):
    def __init__(self, cin, cout, shallow_channels, cfg):
        super().__init__()
        self.aggregate = nn.Conv2d(cin, cout, 1)
        self.ddfd = DDFD(cout, shallow_channels)
        self.biaf = BIAF(cout, heads=cfg.heads, kernels=cfg.dynamic_kernels,
                         fusion_mode=cfg.fusion_mode, max_tokens=cfg.max_attention_tokens)
        self.block = ConvBlock(cout, cout)

    def forward(self, row, below_up, deep, shallow):
        current = self.aggregate(torch.cat(row + [below_up], dim=1))
        d = self.ddfd(deep, current, shallow)
        fused = self.biaf(d.global_ctx, d.local_edge, d.channel_texture)
        return self.block(current + fused), fused


class DBIFAUNet(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        depth = cfg.depth
        w = cfg.width
        self.fused = cfg.ablation != "no_ddfd_biaf"

        self.encoder = nn.ModuleList([ConvBlock(cfg.input_channels, w(0))])
        self.down = nn.ModuleList([nn.Identity()])
        for i in range(1, depth):
            self.down.append(ConvUnit(w(i - 1), w(i), stride=2))
            self.encoder.append(ConvBlock(w(i), w(i)))

        if self.fused:
            self.stem = nn.Sequential(nn.Conv2d(cfg.input_channels, w(0) // 2, 3, padding=1),
                                      nn.ReLU(inplace=True))
        self.nodes = nn.ModuleDict()
        for j in range(1, depth):
            for i in range(depth - j):
                cin = j * w(i) + w(i + 1)
                if self.fused:
                    shallow_ch = w(i - 1) if i > 0 else w(0) // 2
                    self.nodes[f"x{i}_{j}"] = FusionNode(cin, w(i), shallow_ch, cfg)
                else:
                    self.nodes[f"x{i}_{j}"] = PlainNode(cin, w(i))

        self.u_heads = nn.ModuleList([SupervisionHead(w(0)) for _ in range(depth - 1)])
        self.b_heads = nn.ModuleList([SupervisionHead(w(0)) for _ in range(depth - 1)])
        self._init_parameters()

    def _init_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    @property
    def n_heads(self):
        return self.cfg.depth - 1

    def check_input(self, x):
        if x.dim() != 4 or x.shape[1] != self.cfg.input_channels:
            raise ValidationError(
                f"expected (B, {self.cfg.input_channels}, H, W) input, got {tuple(x.shape)}")
        d = self.cfg.divisor
        if x.shape[-2] % d or x.shape[-1] % d:
            raise ValidationError(
                f"input size {tuple(x.shape[-2:])} must be divisible by {d} at depth {self.cfg.depth}")

    def forward(self, x, heads="all"):
        """Return :class:`SupervisionOutputs`; ``heads="final"`` evaluates only the last u-head."""
        self.check_input(x)
        depth = self.cfg.depth
        size = x.shape[-2:]
        X = [[None] * depth for _ in range(depth)]
        X[0][0] = self.encoder[0](x)
        for i in range(1, depth):
            X[i][0] = self.encoder[i](self.down[i](X[i - 1][0]))

        stem = self.stem(x) if self.fused else None
        taps = {}
        for j in range(1, depth):
            for i in range(depth - j):
                node = self.nodes[f"x{i}_{j}"]
                below = X[i + 1][j - 1]
                below_up = F.interpolate(below, scale_factor=2, mode="bilinear", align_corners=False)
                row = X[i][:j]
                if self.fused:
                    shallow = X[i - 1][0] if i > 0 else stem
                    X[i][j], tap = node(row, below_up, below, shallow)
                else:
                    X[i][j], tap = node(row, below_up, None)
                if i == 0:
                    taps[j] = tap

        out = SupervisionOutputs()
        if heads == "final":
            out.u_heads = [self.u_heads[-1](X[0][depth - 1], size)]
            return out
        out.u_heads = [self.u_heads[j - 1](X[0][j], size) for j in range(1, depth)]
        out.b_heads = [self.b_heads[j - 1](taps[j], size) for j in range(1, depth)]
        return out


def build(cfg, seed=0, dtype=torch.float32):
    """Construct a model with parameters drawn from ``seed``."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = DBIFAUNet(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype)


def parameter_count(model):
    return sum(p.numel() for p in model.parameters())
