"""Dice / IoU per subject and their unweighted cross-subject means."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _counts(pred, gt) -> tuple[int, int, int]:
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return int(np.count_nonzero(pred & gt)), int(np.count_nonzero(pred)), int(np.count_nonzero(gt))


def dice(pred, gt) -> float:
    """2|P&G| / (|P|+|G|); two empty masks score 1.0."""
    inter, p, g = _counts(pred, gt)
    if p + g == 0:
        return 1.0
    return 2.0 * inter / (p + g)


def iou(pred, gt) -> float:
    """Intersection over union; two empty masks score 1.0."""
    inter, p, g = _counts(pred, gt)
    union = p + g - inter
    if union == 0:
        return 1.0
    return inter / union


@dataclass
class MetricReport:
    per_subject: list[dict] = field(default_factory=list)
    mean_dice: float = 0.0
    mean_iou: float = 0.0

    def to_dict(self) -> dict:
        return {"per_subject": self.per_subject, "mean_dice": self.mean_dice, "mean_iou": self.mean_iou}


def aggregate(pairs) -> MetricReport:
    """``pairs`` is an iterable of ``(pred, gt, id)``; rows keep input order."""
    rows = [{"id": str(sid), "dice": dice(p, g), "iou": iou(p, g)} for p, g, sid in pairs]
    if not rows:
        raise ValueError("cannot aggregate an empty list of subjects")
    return MetricReport(
        per_subject=rows,
        mean_dice=float(np.mean([r["dice"] for r in rows])),
        mean_iou=float(np.mean([r["iou"] for r in rows])),
    )
