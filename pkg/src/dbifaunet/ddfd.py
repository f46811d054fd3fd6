"""Dual-domain feature disentanglement.

Splits the (deep, current, shallow) triple gathered by a nested skip node into
three streams aligned to the current node's shape:

* global context: frequency channel attention on the deep features, projected
  and bilinearly upsampled;
* local edges: strip-pooling attention on the shallow features weighting a
  Gabor-filtered Haar decomposition of the same features;
* channel texture: DCT band re-weighting of the current features.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from . import spectral_ops as so
from .errors import ValidationError


@dataclass
class MultiLevelFeatures:
    deep: torch.Tensor
    current: torch.Tensor
    shallow: torch.Tensor


@dataclass
class DisentangledFeatures:
    global_ctx: torch.Tensor
    local_edge: torch.Tensor
    channel_texture: torch.Tensor


GABOR_THETAS = (0.0, math.pi / 4, math.pi / 2, 3 * math.pi / 4)
MIN_HIDDEN = 16


def bottleneck(width, reduction):
    """Hidden width ``width // reduction``, floored at ``MIN_HIDDEN`` (never above ``width``).

    Very narrow bias-free bottlenecks can start with every ReLU unit inactive.
    """
    return min(width, max(MIN_HIDDEN, width // reduction))


class GlobalBranch(nn.Module):
    def __init__(self, channels, reduction=4):
        super().__init__()
        deep_ch = 2 * channels
        hidden = bottleneck(deep_ch, reduction)
        self.fc1 = nn.Linear(deep_ch, hidden)
        self.fc2 = nn.Linear(hidden, deep_ch)
        self.proj = nn.Conv2d(deep_ch, channels, 1, bias=False)

    def forward(self, deep, size):
        h, w = size
        if (deep.shape[-2] * 2, deep.shape[-1] * 2) != (h, w):
            raise ValidationError(
                f"deep features {tuple(deep.shape[-2:])} are not half of {(h, w)}")
        c = so.freq_channel_attention(deep, self.fc1.weight, self.fc2.weight,
                                      self.fc1.bias, self.fc2.bias)
        x = self.proj(deep * c[:, :, None, None])
        return F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)


class LocalBranch(nn.Module):
    def __init__(self, channels, shallow_channels=None, gabor_size=7, gabor_freq=0.25,
                 gabor_gamma=0.5, gabor_sigma=2.0):
        super().__init__()
        shallow_channels = shallow_channels or max(1, channels // 2)
        self.channels = channels
        self.gabor_size = gabor_size
        self.gabor_gamma = gabor_gamma
        self.gabor_sigma = gabor_sigma
        self.proj_in = nn.Conv2d(shallow_channels, channels, 1, bias=False)
        self.strip_proj = nn.Conv2d(2 * channels, channels, 1, bias=False)
        self.theta = nn.Parameter(torch.tensor(GABOR_THETAS))
        self.freq = nn.Parameter(torch.tensor(gabor_freq))
        self.proj_out = nn.Conv2d(channels, channels, 1, bias=False)
        self.norm = nn.BatchNorm2d(channels)

    def gabor_bank(self):
        kernels = [so.gabor_grid(t, self.freq, self.gabor_gamma, self.gabor_sigma, 0.0,
                                 self.gabor_size) for t in self.theta]
        bank = torch.stack(kernels)
        # zero-mean kernels give no response on flat regions
        return bank - bank.mean(dim=(-2, -1), keepdim=True)

    def gabor_filter(self, x):
        # filtering is linear, so summing the bank's responses equals filtering
        # once with the summed kernel
        kernel = self.gabor_bank().sum(dim=0).to(x.dtype)
        weight = kernel.expand(x.shape[1], 1, -1, -1)
        pad = self.gabor_size // 2
        x = F.pad(x, (pad, pad, pad, pad), mode="replicate")
        return F.conv2d(x, weight, groups=x.shape[1])

    def forward(self, shallow, size):
        h, w = size
        sh, sw = shallow.shape[-2:]
        if (sh, sw) == (2 * h, 2 * w):
            shallow = F.avg_pool2d(shallow, 2)
        elif (sh, sw) != (h, w):
            raise ValidationError(
                f"shallow features {(sh, sw)} must be {(2 * h, 2 * w)} (or {(h, w)} on the top row)")
        s = self.proj_in(shallow)

        y_h, y_v = so.strip_pool(s)
        strip = torch.cat([y_h.expand(-1, -1, h, w), y_v.expand(-1, -1, h, w)], dim=1)
        strip = self.strip_proj(strip)

        bands = so.dwt2_haar(s)
        ll = F.interpolate(bands.LL, size=(h, w), mode="bilinear", align_corners=False)
        hh = F.interpolate(bands.HH, size=(h, w), mode="bilinear", align_corners=False)
        # LL and HH are filtered by the same bank and summed; by linearity this
        # is one filtering pass over their sum
        texture = self.gabor_filter(ll + hh)

        return self.norm(self.proj_out(strip * texture))


class ChannelBranch(nn.Module):
    def __init__(self, channels, low_cut=0.25, high_cut=0.75):
        super().__init__()
        self.low_cut = low_cut
        self.high_cut = high_cut
        # rows: low, mid, high band gains
        self.gains = nn.Parameter(torch.ones(3, channels))

    def forward(self, current):
        coeffs = so.dct2(current)
        bands = so.band_split(coeffs, self.low_cut, self.high_cut)
        mixed = sum(g[None, :, None, None] * b for g, b in zip(self.gains, bands))
        return so.idct2(mixed)


class DDFD(nn.Module):
    def __init__(self, channels, shallow_channels=None, reduction=4, low_cut=0.25, high_cut=0.75):
        super().__init__()
        self.global_branch = GlobalBranch(channels, reduction)
        self.local_branch = LocalBranch(channels, shallow_channels)
        self.channel_branch = ChannelBranch(channels, low_cut, high_cut)

    def forward(self, deep, current, shallow):
        size = current.shape[-2:]
        return DisentangledFeatures(
            global_ctx=self.global_branch(deep, size),
            local_edge=self.local_branch(shallow, size),
            channel_texture=self.channel_branch(current),
        )


def ddfd_forward(module, m):
    return module(m.deep, m.current, m.shallow)
