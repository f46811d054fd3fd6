"""Spectral and pooling primitives shared by the DDFD and BIAF blocks.

Every function takes and returns ``(batch, channel, row, col)`` tensors and is
differentiable, so the same code path serves tests and training.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn.functional as F

from .errors import ValidationError


@dataclass(frozen=True)
class GaborParams:
    theta: float
    f: float
    gamma: float = 0.5
    sigma: float = 2.0
    phi: float = 0.0
    size: int = 7

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValidationError(f"sigma must be > 0, got {self.sigma}")
        if not self.f > 0:
            raise ValidationError(f"f must be > 0, got {self.f}")
        if self.size < 3 or self.size % 2 == 0:
            raise ValidationError(f"size must be odd and >= 3, got {self.size}")


@dataclass
class WaveletBands:
    LL: torch.Tensor
    LH: torch.Tensor
    HL: torch.Tensor
    HH: torch.Tensor


def check_feature_map(x, name="x"):
    if not isinstance(x, torch.Tensor) or x.dim() != 4:
        raise ValidationError(f"{name} must be a 4-d (B, C, H, W) tensor")
    if min(x.shape) < 1:
        raise ValidationError(f"{name} has an empty dimension: {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValidationError(f"{name} contains non-finite values")


@lru_cache(maxsize=64)
def _dct_matrix_f64(n):
    k = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(n, dtype=torch.float64)[None, :]
    m = torch.cos(math.pi * (2 * i + 1) * k / (2 * n))
    m[0] *= math.sqrt(1.0 / n)
    m[1:] *= math.sqrt(2.0 / n)
    return m


def dct_matrix(n, dtype=torch.float64, device=None):
    """Orthonormal DCT-II matrix ``D`` with ``D @ x`` transforming a length-n vector."""
    return _dct_matrix_f64(n).to(dtype=dtype, device=device)


def _separable(x, left, right):
    # accumulate in float64 so 32-bit roundtrips stay within single-precision rounding
    y = left @ x.to(torch.float64) @ right
    return y.to(x.dtype)


def dct2(x):
    check_feature_map(x)
    dh = dct_matrix(x.shape[-2], device=x.device)
    dw = dct_matrix(x.shape[-1], device=x.device)
    return _separable(x, dh, dw.T)


def idct2(coeffs, shape=None):
    check_feature_map(coeffs, "coeffs")
    if shape is not None and tuple(coeffs.shape[-2:]) != tuple(shape):
        raise ValidationError(
            f"coefficient grid {tuple(coeffs.shape[-2:])} does not match declared {tuple(shape)}")
    dh = dct_matrix(coeffs.shape[-2], device=coeffs.device)
    dw = dct_matrix(coeffs.shape[-1], device=coeffs.device)
    return _separable(coeffs, dh.T, dw)


def dct1_channels(v):
    """Orthonormal DCT-II along the last axis of a (B, C) vector batch."""
    d = dct_matrix(v.shape[-1], v.dtype, v.device)
    return v @ d.T


def band_masks(h, w, low_cut=0.25, high_cut=0.75, device=None):
    if not 0 < low_cut < high_cut <= 1:
        raise ValidationError(f"need 0 < low_cut < high_cut <= 1, got {low_cut}, {high_cut}")
    u = torch.arange(h, dtype=torch.float64, device=device)[:, None] / h
    v = torch.arange(w, dtype=torch.float64, device=device)[None, :] / w
    r = (u + v) / 2
    low = r < low_cut
    high = r >= high_cut
    mid = ~(low | high)
    return low, mid, high


def band_split(coeffs, low_cut=0.25, high_cut=0.75):
    """Partition DCT coefficients into (low, mid, high) by normalized zig-zag radius."""
    low, mid, high = band_masks(coeffs.shape[-2], coeffs.shape[-1], low_cut, high_cut, coeffs.device)
    zero = coeffs.new_zeros(())
    return (torch.where(low, coeffs, zero),
            torch.where(mid, coeffs, zero),
            torch.where(high, coeffs, zero))


def dwt2_haar(x):
    """Single-level orthonormal Haar analysis; odd sides are symmetric-padded first."""
    check_feature_map(x)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        # symmetric padding by one sample repeats the edge row/column
        x = F.pad(x, (0, w % 2, 0, h % 2), mode="replicate")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return WaveletBands(
        LL=(a + b + c + d) / 2,
        LH=(a + b - c - d) / 2,
        HL=(a - b + c - d) / 2,
        HH=(a - b - c + d) / 2,
    )


def idwt2_haar(bands, shape=None):
    ll, lh, hl, hh = bands.LL, bands.LH, bands.HL, bands.HH
    a = (ll + lh + hl + hh) / 2
    b = (ll + lh - hl - hh) / 2
    c = (ll - lh + hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    bsz, ch, h2, w2 = ll.shape
    out = ll.new_empty(bsz, ch, 2 * h2, 2 * w2)
    out[..., 0::2, 0::2] = a
    out[..., 0::2, 1::2] = b
    out[..., 1::2, 0::2] = c
    out[..., 1::2, 1::2] = d
    if shape is not None:
        out = out[..., : shape[0], : shape[1]]
    return out


def gabor_grid(theta, freq, gamma, sigma, phi, size):
    """Differentiable Gabor kernel; ``theta`` and ``freq`` may be tensors carrying grads."""
    if not isinstance(theta, torch.Tensor):
        theta = torch.tensor(theta, dtype=torch.float64)
    freq = torch.as_tensor(freq, dtype=theta.dtype, device=theta.device)
    half = size // 2
    coords = torch.arange(-half, half + 1, dtype=theta.dtype, device=theta.device)
    i = coords[:, None]
    j = coords[None, :]
    ip = i * torch.cos(theta) + j * torch.sin(theta)
    jp = -i * torch.sin(theta) + j * torch.cos(theta)
    envelope = torch.exp(-(ip ** 2 + gamma ** 2 * jp ** 2) / (2 * sigma ** 2))
    return envelope * torch.cos(2 * math.pi * freq * ip + phi)


def gabor_kernel(p):
    if p.size % 2 == 0 or p.size < 3:
        raise ValidationError(f"size must be odd and >= 3, got {p.size}")
    return gabor_grid(p.theta, p.f, p.gamma, p.sigma, p.phi, p.size)


def strip_pool(x):
    """Row means ``(B, C, H, 1)`` and column means ``(B, C, 1, W)``."""
    return x.mean(dim=-1, keepdim=True), x.mean(dim=-2, keepdim=True)


def freq_channel_attention(x, w1, w2, b1, b2):
    """Frequency-domain channel attention vector, shape ``(B, C)``.

    ``w1`` is ``(hidden, C)`` and ``w2`` is ``(C, hidden)`` in the ``nn.Linear``
    layout. The gate sees the magnitude of the channel DCT; the product uses
    the signed coefficients.
    """
    c = x.shape[1]
    if w1.shape[-1] != c or w2.shape[0] != c or w1.shape[0] != w2.shape[-1]:
        raise ValidationError(
            f"weights {tuple(w1.shape)}/{tuple(w2.shape)} do not fit {c} channels")
    pooled = x.mean(dim=(-2, -1))
    spec = dct1_channels(pooled)
    hidden = F.relu(F.linear(spec.abs(), w1, b1))
    gate = torch.sigmoid(F.linear(hidden, w2, b2))
    return gate * spec
