"""Branch interactive attention fusion.

The three disentangled streams are enhanced in parallel (spectral self-attention,
dynamic convolution, thresholded deformable convolution), fused with an
SE-style vector and finally mixed back to ``C`` channels by a per-channel
softmax gate over the three streams.
"""

import math

import torch
import torch.nn.functional as F
from torch import nn

from .ddfd import bottleneck
from .errors import ValidationError


def spectral_band_masks(h, w, device=None):
    """Low/mid/high thirds of the normalized radial FFT frequency."""
    fy = torch.fft.fftfreq(h, device=device, dtype=torch.float64)[:, None] / 0.5
    fx = torch.fft.fftfreq(w, device=device, dtype=torch.float64)[None, :] / 0.5
    rho = torch.sqrt(fy ** 2 + fx ** 2) / math.sqrt(2)
    low = rho < 1 / 3
    high = rho >= 2 / 3
    return low, ~(low | high), high


class GlobalAttention(nn.Module):
    """Self-attention over spatial tokens in the 2-D Fourier domain.

    Inputs larger than ``max_tokens`` positions are average-pooled by a power
    of two before attention and the result is bilinearly restored.
    """

    def __init__(self, channels, heads=1, max_tokens=1024):
        super().__init__()
        if heads < 1 or channels % heads or channels // heads == 0:
            raise ValidationError(f"{channels} channels cannot be split into {heads} heads (d_k = 0)")
        self.heads = heads
        self.d_k = channels // heads
        self.max_tokens = max_tokens
        self.q = nn.Conv2d(channels, channels, 1, bias=False)
        self.k = nn.Conv2d(channels, channels, 1, bias=False)
        self.v = nn.Conv2d(channels, channels, 1, bias=False)
        self.cfc = nn.Conv2d(3 * channels, channels, 1, bias=False)

    def _pool_factor(self, h, w):
        s = 1
        while math.ceil(h / s) * math.ceil(w / s) > self.max_tokens:
            s *= 2
        return s

    def _tokens(self, t):
        """Real and imaginary FFT token matrices, each ``(B, heads, N, d_k)``."""
        b, c, h, w = t.shape
        spec = torch.fft.fft2(t)
        def split(z):
            return z.reshape(b, self.heads, self.d_k, h * w).transpose(-1, -2)
        return split(spec.real), split(spec.imag)

    def attention(self, x):
        """Attention weights ``(B, heads, N, N)`` on the (possibly pooled) grid."""
        q_re, q_im = self._tokens(self.q(x))
        k_re, k_im = self._tokens(self.k(x))
        # complex product F(Q) F(K)^T assembled from real matmuls
        q = torch.cat([q_re, q_im], dim=-1)
        re = q @ torch.cat([k_re, -k_im], dim=-1).transpose(-1, -2)
        im = q @ torch.cat([k_im, k_re], dim=-1).transpose(-1, -2)
        scores = torch.sqrt(re ** 2 + im ** 2 + 1e-12) / math.sqrt(self.d_k)
        return torch.softmax(scores, dim=-1)

    def forward(self, x):
        b, c, h, w = x.shape
        s = self._pool_factor(h, w)
        xs = F.adaptive_avg_pool2d(x, (math.ceil(h / s), math.ceil(w / s))) if s > 1 else x
        hs, ws = xs.shape[-2:]

        attn = self.attention(xs)
        v_re, v_im = self._tokens(self.v(xs))
        out = attn @ torch.cat([v_re, v_im], dim=-1)
        out = out.transpose(-1, -2).reshape(b, self.heads, 2, self.d_k, hs * ws)
        out_re = out[:, :, 0].reshape(b, c, hs, ws)
        out_im = out[:, :, 1].reshape(b, c, hs, ws)

        masks = [m.to(x.dtype) for m in spectral_band_masks(hs, ws, x.device)]
        mixed_re = self.cfc(torch.cat([out_re * m for m in masks], dim=1))
        mixed_im = self.cfc(torch.cat([out_im * m for m in masks], dim=1))
        a_g = torch.fft.ifft2(torch.complex(mixed_re, mixed_im)).real
        if s > 1:
            a_g = F.interpolate(a_g, size=(h, w), mode="bilinear", align_corners=False)
        return a_g


class LocalDynamicConv(nn.Module):
    """Average of ``K`` input-gated 3x3 convolutions, each variance-normalized."""

    def __init__(self, channels, kernels=4, eps=1e-5, momentum=0.1):
        super().__init__()
        self.kernels = kernels
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.empty(kernels, channels, channels, 3, 3))
        self.gate = nn.Parameter(torch.empty(kernels, channels, channels))
        for k in range(kernels):
            nn.init.kaiming_uniform_(self.weight.data[k], a=math.sqrt(5))
            nn.init.kaiming_uniform_(self.gate.data[k], a=math.sqrt(5))
        self.register_buffer("running_var", torch.ones(kernels))

    def forward(self, x):
        b, c, h, w = x.shape
        resp = F.conv2d(x, self.weight.reshape(-1, c, 3, 3), padding=1)
        resp = resp.reshape(b, self.kernels, c, h, w)
        gates = torch.sigmoid(torch.einsum("kdc,bc->bkd", self.gate, x.mean(dim=(-2, -1))))
        if self.training:
            var = resp.transpose(0, 1).reshape(self.kernels, -1).var(dim=1, unbiased=False)
            with torch.no_grad():
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * var.detach())
        else:
            var = self.running_var
        scale = 1.0 / torch.sqrt(var + self.eps)
        out = gates[..., None, None] * resp * scale[None, :, None, None, None]
        return out.mean(dim=1)


def deform_kernel(weight, offset):
    """Dense kernel equivalent to a 3x3 deformable kernel with per-tap offsets.

    ``weight`` is ``(O, C, 3, 3)`` and ``offset`` is ``(9, 2)`` holding the
    (row, col) displacement of each tap in row-major order. Each tap's weight
    is spread bilinearly over the four integer positions around its displaced
    location. Returns the kernel and its radius ``R`` (kernel side ``2R+1``).
    """
    dtype = weight.dtype
    taps = torch.arange(9, device=weight.device)
    base = torch.stack([taps // 3 - 1, taps % 3 - 1], dim=1).to(dtype)
    pos = base + offset.to(dtype)
    lo = pos.detach().floor()
    frac = pos - lo
    lo = lo.long()
    radius = int(max(1, lo.abs().max().item(), (lo + 1).abs().max().item()))
    side = 2 * radius + 1

    fy, fx = frac[:, 0], frac[:, 1]
    coef = torch.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], dim=1)
    ry = lo[:, 0:1] + torch.tensor([0, 0, 1, 1], device=weight.device) + radius
    rx = lo[:, 1:2] + torch.tensor([0, 1, 0, 1], device=weight.device) + radius
    spread = coef.new_zeros(9, side * side).scatter_add(1, ry * side + rx, coef)
    o, c = weight.shape[:2]
    kernel = (weight.reshape(o, c, 9) @ spread).reshape(o, c, side, side)
    return kernel, radius


def deform_conv3x3(x, weight, offset):
    """3x3 deformable convolution with learnable per-tap offsets.

    Every output position samples ``p0 + p_n + offset_n`` bilinearly. Outside
    the one-pixel zero-padded grid samples clamp to its (zero) border, which
    makes the operation a plain zero-padded convolution with the spread kernel.
    """
    kernel, radius = deform_kernel(weight, offset)
    return F.conv2d(x, kernel, padding=radius)


def soft_threshold(z, tau):
    return torch.sign(z) * F.relu(z.abs() - tau)


class ChannelDeformThreshold(nn.Module):
    def __init__(self, channels, tau_init=0.1):
        super().__init__()
        self.offset1 = nn.Parameter(torch.zeros(9, 2))
        self.offset2 = nn.Parameter(torch.zeros(9, 2))
        self.weight1 = nn.Parameter(torch.empty(channels, channels, 3, 3))
        self.weight2 = nn.Parameter(torch.empty(channels, channels, 3, 3))
        nn.init.kaiming_uniform_(self.weight1, a=math.sqrt(5))
        nn.init.kaiming_uniform_(self.weight2, a=math.sqrt(5))
        # softplus(tau_raw) == tau_init
        self.tau_raw = nn.Parameter(torch.full((channels,), math.log(math.expm1(tau_init))))

    @property
    def tau(self):
        return F.softplus(self.tau_raw)

    def conv_outputs(self, x):
        z1 = deform_conv3x3(x, self.weight1, self.offset1)
        z2 = deform_conv3x3(x, self.weight2, self.offset2)
        return z1, z2

    def forward(self, x):
        z1, z2 = self.conv_outputs(x)
        tau = self.tau[None, :, None, None]
        return soft_threshold(z1, tau) * soft_threshold(z2, tau)


class BranchFuse(nn.Module):
    def __init__(self, channels, reduction=4, fusion_mode="add"):
        super().__init__()
        if fusion_mode not in ("add", "mul"):
            raise ValidationError(f"fusion_mode must be 'add' or 'mul', got {fusion_mode!r}")
        self.channels = channels
        self.fusion_mode = fusion_mode
        hidden = bottleneck(3 * channels, reduction)
        self.fc1 = nn.Linear(3 * channels, hidden, bias=False)
        self.fc2 = nn.Linear(hidden, 3 * channels, bias=False)

    def forward(self, a_g, a_l, a_c, x1, x2, x3):
        shapes = {t.shape for t in (a_g, a_l, a_c, x1, x2, x3)}
        if len(shapes) != 1 or x1.shape[1] != self.channels:
            raise ValidationError(f"branch maps must share shape (*, {self.channels}, H, W)")
        z = torch.cat([a_g * x1, a_l * x2, a_c * x3], dim=1)
        s = torch.sigmoid(self.fc2(F.relu(self.fc1(z.mean(dim=(-2, -1))))))[..., None, None]
        return z + s if self.fusion_mode == "add" else z * s


class InteractiveGate(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.channels = channels
        # rows [i*C:(i+1)*C] hold the logit weights of stream i
        self.weight = nn.Linear(3 * channels, 3 * channels, bias=False)

    def weights(self, y):
        logits = self.weight(y.mean(dim=(-2, -1))).reshape(y.shape[0], 3, self.channels)
        return torch.softmax(logits, dim=1)

    def forward(self, y):
        gates = self.weights(y)
        streams = y.reshape(y.shape[0], 3, self.channels, *y.shape[-2:])
        return (gates[..., None, None] * streams).sum(dim=1)


class BIAF(nn.Module):
    def __init__(self, channels, heads=1, kernels=4, fusion_mode="add", max_tokens=1024,
                 reduction=4):
        super().__init__()
        self.global_attention = GlobalAttention(channels, heads, max_tokens)
        self.local_dynamic_conv = LocalDynamicConv(channels, kernels)
        self.channel_deform = ChannelDeformThreshold(channels)
        self.fuse = BranchFuse(channels, reduction, fusion_mode)
        self.gate = InteractiveGate(channels)

    def forward(self, x1, x2, x3):
        a_g = self.global_attention(x1)
        a_l = self.local_dynamic_conv(x2)
        a_c = self.channel_deform(x3)
        return self.gate(self.fuse(a_g, a_l, a_c, x1, x2, x3))


def biaf_forward(module, d):
    return module(d.global_ctx, d.local_edge, d.channel_texture)
