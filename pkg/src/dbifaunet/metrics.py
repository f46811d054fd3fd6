"""Confusion counting and the six overlap/classification scores."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ValidationError

METRIC_NAMES = ("iou", "dice", "accuracy", "precision", "recall", "specificity")


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


@dataclass
class MetricReport:
    iou: float
    dice: float
    accuracy: float
    precision: float
    recall: float
    specificity: float
    n_images: int = 1
    counts: ConfusionCounts = None
    degenerate: list = field(default_factory=list)
    aggregation: str = "pooled"
    per_image: list = None
    macro: dict = None

    def as_percent(self):
        return {k: round(100 * getattr(self, k), 1) for k in METRIC_NAMES}

    def to_dict(self):
        d = asdict(self)
        d["percent"] = self.as_percent()
        return d

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def binarize(pred, threshold=0.5):
    return (np.asarray(pred) >= threshold).astype(np.uint8)


def accumulate(pred_bin, truth):
    pred_bin = np.asarray(pred_bin).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred_bin.shape != truth.shape:
        raise ValidationError(f"prediction {pred_bin.shape} and truth {truth.shape} differ")
    tp = int(np.count_nonzero(pred_bin & truth))
    fp = int(np.count_nonzero(pred_bin & ~truth))
    fn = int(np.count_nonzero(~pred_bin & truth))
    tn = int(pred_bin.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 1.0
    return num / den


def report(c, n_images=1):
    if c.total == 0:
        raise ValidationError("no pixels were evaluated")
    flags = []
    return MetricReport(
        iou=_ratio(c.tp, c.tp + c.fp + c.fn, "iou", flags),
        dice=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "dice", flags),
        accuracy=(c.tp + c.tn) / c.total,
        precision=_ratio(c.tp, c.tp + c.fp, "precision", flags),
        recall=_ratio(c.tp, c.tp + c.fn, "recall", flags),
        specificity=_ratio(c.tn, c.tn + c.fp, "specificity", flags),
        n_images=n_images,
        counts=c,
        degenerate=flags,
    )


def split_report(per_image_counts):
    """Pooled report over a split, with per-image macro averages attached."""
    pooled = ConfusionCounts()
    for c in per_image_counts:
        pooled = pooled + c
    rep = report(pooled, n_images=len(per_image_counts))
    singles = [report(c) for c in per_image_counts]
    rep.per_image = [{k: getattr(r, k) for k in METRIC_NAMES} for r in singles]
    rep.macro = {k: float(np.mean([getattr(r, k) for r in singles])) for k in METRIC_NAMES}
    return rep
