"""Binary segmentation metrics: precision, pixel accuracy and Jaccard."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class EvalRecord:
    precision: float
    pixel_accuracy: float
    jaccard: float
    tp: int
    fp: int
    fn: int
    tn: int
    # prediction had no foreground; precision reported as 0
    precision_undefined: bool = False
    # neither mask has foreground; jaccard reported as 1
    jaccard_undefined: bool = False

    @property
    def counts(self) -> tuple[int, int, int, int]:
        return self.tp, self.fp, self.fn, self.tn


def binarize(logits) -> np.ndarray:
    """Foreground where the foreground logit is strictly larger (ties go to background)."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if z.ndim < 3 or z.shape[-3] != 2:
        raise ValueError(f"expected [2,H,W] or [N,2,H,W] logits, got {z.shape}")
    return (np.take(z, 1, axis=-3) > np.take(z, 0, axis=-3)).astype(np.uint8)


def record_from_counts(tp: int, fp: int, fn: int, tn: int) -> EvalRecord:
    total = tp + fp + fn + tn
    pred_fg, union = tp + fp, tp + fp + fn
    return EvalRecord(
        precision=tp / pred_fg if pred_fg else 0.0,
        pixel_accuracy=(tp + tn) / total if total else 0.0,
        jaccard=tp / union if union else 1.0,
        tp=tp,
        fp=fp,
        fn=fn,
        tn=tn,
        precision_undefined=pred_fg == 0,
        jaccard_undefined=union == 0,
    )


def evaluate(pred, gt) -> EvalRecord:
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    return record_from_counts(tp, fp, fn, tn)


def mean_record(records: Iterable[EvalRecord]) -> dict[str, float]:
    """Per-image average of the three scores (what validation reports)."""
    records = list(records)
    if not records:
        raise ValueError("no records to average")
    return {
        "precision": float(np.mean([r.precision for r in records])),
        "pixel_accuracy": float(np.mean([r.pixel_accuracy for r in records])),
        "jaccard": float(np.mean([r.jaccard for r in records])),
    }
