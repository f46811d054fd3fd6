"""Hybrid Dice/Focal/BCE loss and the depth-weighted nested supervision total."""

import math
from dataclasses import dataclass, field

import torch

from .errors import ValidationError

PROB_CLAMP = 1e-7


@dataclass
class LossHyperParams:
    lambda_dice: float = 0.4
    lambda_focal: float = 0.3
    lambda_bce: float = 0.3
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dice_eps: float = 1.0
    # softmax temperatures of the u- and b-head depth weights
    u_scale: float = 1.5 * 0.9
    b_scale: float = 1.5 * 0.7

    def __post_init__(self):
        total = self.lambda_dice + self.lambda_focal + self.lambda_bce
        if not math.isclose(total, 1.0, abs_tol=1e-9):
            raise ValidationError(f"loss weights must sum to 1, got {total}")
        if not 0 < self.focal_alpha < 1:
            raise ValidationError(f"focal_alpha must be in (0, 1), got {self.focal_alpha}")
        if self.focal_gamma < 0:
            raise ValidationError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if self.dice_eps <= 0:
            raise ValidationError(f"dice_eps must be > 0, got {self.dice_eps}")


@dataclass
class PointLoss:
    dice: float
    focal: float
    bce: float
    hybrid: float


@dataclass
class LossBreakdown:
    total: torch.Tensor
    per_point: list = field(default_factory=list)
    w_u: list = field(default_factory=list)
    w_s: list = field(default_factory=list)

    def to_dict(self):
        return {
            "total": float(self.total.detach()),
            "per_point": [vars(p) for p in self.per_point],
            "weights": {"w_U": list(self.w_u), "w_S": list(self.w_s)},
        }


def _check(pred, truth):
    if pred.shape != truth.shape:
        raise ValidationError(f"pred {tuple(pred.shape)} and truth {tuple(truth.shape)} differ")


def dice_loss(pred, truth, eps=1.0):
    _check(pred, truth)
    inter = (truth * pred).sum()
    return 1 - (2 * inter + eps) / (truth.sum() + pred.sum() + eps)


def focal_loss(pred, truth, alpha=0.25, gamma=2.0):
    _check(pred, truth)
    p = pred.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    pos = alpha * (1 - p) ** gamma * truth * torch.log(p)
    neg = (1 - alpha) * p ** gamma * (1 - truth) * torch.log(1 - p)
    return -(pos + neg).mean()


def bce_loss(pred, truth):
    _check(pred, truth)
    p = pred.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return -(truth * torch.log(p) + (1 - truth) * torch.log(1 - p)).mean()


def hybrid_terms(pred, truth, h=None):
    h = h or LossHyperParams()
    d = dice_loss(pred, truth, h.dice_eps)
    f = focal_loss(pred, truth, h.focal_alpha, h.focal_gamma)
    b = bce_loss(pred, truth)
    return d, f, b, h.lambda_dice * d + h.lambda_focal * f + h.lambda_bce * b


def hybrid_loss(pred, truth, h=None):
    return hybrid_terms(pred, truth, h)[-1]


def depth_ratios(depth_count=4):
    """Area ratios 4**(j-1) / sum_m 4**(m-1) of the top-row nodes, j = 1..n."""
    areas = [4 ** j for j in range(depth_count)]
    total = sum(areas)
    return [a / total for a in areas]


def _softmax(values):
    m = max(values)
    e = [math.exp(v - m) for v in values]
    s = sum(e)
    return [x / s for x in e]


def supervision_weights(depth_count=4, h=None):
    """Return ``(w_U, w_S)``: softmax across depth of the scaled area ratios."""
    h = h or LossHyperParams()
    ratios = depth_ratios(depth_count)
    w_u = _softmax([h.u_scale * r for r in ratios])
    w_s = _softmax([h.b_scale * r for r in ratios])
    return w_u, w_s


def total_loss(outputs, truth, h=None, nested=True):
    """Weighted sum of per-head hybrid losses.

    With ``nested=False`` only the u-heads are supervised, with uniform
    weights (plain UNet++ deep supervision).
    """
    h = h or LossHyperParams()
    n = len(outputs.u_heads)
    if n == 0 or (nested and len(outputs.b_heads) != n):
        raise ValidationError(
            f"expected matching u/b supervision maps, got {len(outputs.u_heads)}/{len(outputs.b_heads)}")
    if nested:
        w_u, w_s = supervision_weights(n, h)
        maps = list(outputs.u_heads) + list(outputs.b_heads)
    else:
        w_u, w_s = [1.0 / n] * n, [0.0] * n
        maps = list(outputs.u_heads)
    weights = (w_u + w_s)[: len(maps)]

    total = 0
    per_point = []
    for w, pred in zip(weights, maps):
        d, f, b, hyb = hybrid_terms(pred, truth, h)
        total = total + w * hyb
        per_point.append(PointLoss(*(float(t.detach()) for t in (d, f, b, hyb))))
    return LossBreakdown(total=total, per_point=per_point, w_u=w_u, w_s=w_s)
