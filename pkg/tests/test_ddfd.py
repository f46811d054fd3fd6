import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dbifaunet import spectral_ops as so
from dbifaunet.ddfd import (DDFD, ChannelBranch, GlobalBranch, LocalBranch, MultiLevelFeatures,
                            ddfd_forward)
from dbifaunet.errors import ValidationError

import fd
import oracles
from test_spectral_ops import CHECKER_BAND_ENERGY, checkerboard

C = 4


def triple(c=C, h=16, w=16, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(1, 2 * c, h // 2, w // 2, generator=g, dtype=dtype),
            torch.randn(1, c, h, w, generator=g, dtype=dtype),
            torch.randn(1, c // 2, 2 * h, 2 * w, generator=g, dtype=dtype))


def make(c=C, seed=0):
    torch.manual_seed(seed)
    return DDFD(c, c // 2).double()


def test_shapes():
    m = make()
    out = ddfd_forward(m, MultiLevelFeatures(*triple()))
    for t in (out.global_ctx, out.local_edge, out.channel_texture):
        assert t.shape == (1, C, 16, 16)
        assert torch.isfinite(t).all()


def test_zero_inputs_give_zero_outputs():
    m = make()
    z = [torch.zeros_like(t) for t in triple()]
    out = m(*z)
    for t in (out.global_ctx, out.local_edge, out.channel_texture):
        assert t.abs().max() == 0


def test_global_branch_contract():
    g = GlobalBranch(C).double()
    deep = torch.randn(2, 2 * C, 5, 6, dtype=torch.float64)
    assert g(deep, (10, 12)).shape == (2, C, 10, 12)
    with pytest.raises(ValidationError):
        g(deep, (11, 12))
    # a constant deep map stays constant after channel modulation, mixing and upsampling
    out = g(torch.full((1, 2 * C, 4, 4), 0.7, dtype=torch.float64), (8, 8))
    flat = out.reshape(C, -1)
    assert (flat - flat[:, :1]).abs().max() < 1e-12


def test_local_branch_constant_input_is_flat():
    lb = LocalBranch(C, C // 2).double()
    for training in (True, False):
        lb.train(training)
        out = lb(torch.full((2, C // 2, 32, 32), 2.5, dtype=torch.float64), (16, 16))
        assert out.shape == (2, C, 16, 16)
        assert out.abs().max() < 1e-5


def test_local_branch_accepts_same_size_shallow_and_rejects_others():
    lb = LocalBranch(C, 3).double()
    assert lb(torch.randn(1, 3, 16, 16, dtype=torch.float64), (16, 16)).shape == (1, C, 16, 16)
    with pytest.raises(ValidationError):
        lb(torch.randn(1, 3, 24, 24, dtype=torch.float64), (16, 16))


def test_gabor_bank_is_zero_mean_and_separable_sum():
    lb = LocalBranch(C).double()
    bank = lb.gabor_bank()
    assert bank.shape == (4, 7, 7)
    assert bank.sum(dim=(-2, -1)).abs().max() < 1e-12
    # filtering LL and HH separately and summing equals filtering their sum
    a, b = torch.randn(2, 1, C, 9, 9, dtype=torch.float64)
    assert torch.allclose(lb.gabor_filter(a) + lb.gabor_filter(b), lb.gabor_filter(a + b), atol=1e-12)


def test_channel_branch_identity_and_band_gains():
    cb = ChannelBranch(1).double()
    x = torch.randn(2, 1, 8, 8, dtype=torch.float64)
    assert (cb(x) - x).abs().max() < 1e-10
    with torch.no_grad():
        cb.gains[1:] = 0
    const = torch.full((1, 1, 8, 8), 1.25, dtype=torch.float64)
    assert (cb(const) - const).abs().max() < 1e-12


def test_channel_branch_checkerboard_high_gain_zero():
    cb = ChannelBranch(1).double()
    with torch.no_grad():
        cb.gains[2] = 0
    x = torch.as_tensor(checkerboard())[None, None]
    out = cb(x).detach()
    # only the low and mid band energy survives; the high band (dominant) is removed
    kept = CHECKER_BAND_ENERGY[0] + CHECKER_BAND_ENERGY[1]
    assert float((out ** 2).sum()) == pytest.approx(kept, abs=1e-9)
    want = oracles.naive_idct2(np.where(
        np.add.outer(np.arange(8) / 8, np.arange(8) / 8) / 2 >= 0.75, 0.0,
        oracles.naive_dct2(checkerboard())))
    assert np.abs(out[0, 0].numpy() - want).max() < 1e-10


def test_branch_isolation():
    m = make()
    deep, cur, sh = triple(seed=3)
    base = m(deep, cur, sh)
    no_deep = m(torch.zeros_like(deep), cur, sh)
    assert not torch.equal(base.global_ctx, no_deep.global_ctx)
    assert torch.equal(base.channel_texture, no_deep.channel_texture)
    assert torch.equal(base.local_edge, no_deep.local_edge)
    no_sh = m(deep, cur, torch.zeros_like(sh))
    assert torch.equal(base.global_ctx, no_sh.global_ctx)
    assert torch.equal(base.channel_texture, no_sh.channel_texture)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3))
def test_outputs_finite_for_bounded_inputs(seed, scale):
    m = make(seed=1)
    deep, cur, sh = (t.clamp(-1, 1) * scale for t in triple(seed=seed))
    out = m(deep, cur, sh)
    for t in (out.global_ctx, out.local_edge, out.channel_texture):
        assert torch.isfinite(t).all()


def test_finite_difference_gradients():
    """Autograd matches central differences for every parameter and input (C=4, 16x16)."""
    t0 = time.perf_counter()
    m = make(seed=2)
    deep, cur, sh = (t.requires_grad_() for t in triple(seed=5))
    g = torch.Generator().manual_seed(9)
    # a fixed random probe: a plain sum is blind to everything upstream of batch norm
    probes = [torch.randn(1, C, 16, 16, generator=g, dtype=torch.float64) for _ in range(3)]

    def fn():
        out = m(deep, cur, sh)
        return sum((p * t).sum() for p, t in
                   zip(probes, (out.global_ctx, out.local_edge, out.channel_texture)))

    params = dict(m.named_parameters())
    params.update(deep=deep, current=cur, shallow=sh)
    errors = fd.check_params(fn, params, eps=1e-6, sampled=("deep", "current", "shallow"))
    for name, (err, norm) in errors.items():
        assert norm > 0, f"{name} receives no gradient"
        assert err < 1e-3, f"{name}: relative error {err:.2e}"
    assert time.perf_counter() - t0 < 120


def test_gradient_reaches_every_parameter_plain_sum():
    m = make(seed=4)
    out = m(*triple(seed=6))
    # batch norm makes the plain sum of the local stream constant; sum the other two
    (out.global_ctx.sum() + out.channel_texture.sum() + (out.local_edge ** 2).sum()).backward()
    for name, p in m.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_gabor_params_learnable():
    lb = LocalBranch(C).double()
    assert lb.theta.requires_grad and lb.freq.requires_grad
    assert torch.allclose(lb.theta.detach(), torch.tensor([0, np.pi / 4, np.pi / 2, 3 * np.pi / 4],
                                                          dtype=lb.theta.dtype))
    assert so.GaborParams(theta=0.0, f=float(lb.freq.detach())).f == pytest.approx(0.25)
