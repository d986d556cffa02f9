""" evaluation.py
    Per-point confusion matrix and mIoU over the evaluation classes.

    Rows are ground truth, columns prediction. Column C is an overflow
    column for points predicted as ignore: it counts against recall
    (FN) but is nobody's false positive. Points whose truth is ignore are
    never counted.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from typeguard import typechecked

from udma import taxonomy
from udma.errors import LabelRangeError, ShapeError, UndefinedMetricError

logger = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    num_classes: int = taxonomy.NUM_CLASSES
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes + 1), dtype=np.int64)

    @property
    def ignore_id(self) -> int:
        return self.num_classes

    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other):
        if other.counts.shape != self.counts.shape:
            msg = f"cannot merge confusion matrices {self.counts.shape} and {other.counts.shape}"
            raise ShapeError(msg)
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


@typechecked
def accumulate(cm: ConfusionMatrix, truth: np.ndarray, pred: np.ndarray) -> ConfusionMatrix:
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if truth.shape != pred.shape:
        msg = f"truth has {len(truth)} entries, prediction has {len(pred)}"
        raise ShapeError(msg)
    for name, ids in (('truth', truth), ('prediction', pred)):
        bad = (ids < 0) | (ids > cm.ignore_id)
        if np.any(bad):
            msg = f"{name} id {int(ids[bad][0])} outside [0, {cm.num_classes}) and not ignore ({cm.ignore_id})"
            raise LabelRangeError(msg)
    keep = truth != cm.ignore_id
    width = cm.num_classes + 1
    tally = np.bincount(truth[keep] * width + pred[keep], minlength=cm.num_classes * width)
    cm.counts += tally.reshape(cm.num_classes, width)
    return cm


@typechecked
def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """ (per-class IoU with NaN for absent classes, mean over present classes) """
    true_positive = np.diag(cm.counts[:, :cm.num_classes]).astype(np.float64)
    false_positive = cm.counts[:, :cm.num_classes].sum(axis=0) - true_positive
    false_negative = cm.counts.sum(axis=1) - true_positive
    denominator = true_positive + false_positive + false_negative
    present = denominator > 0
    if not np.any(present):
        msg = "mIoU undefined: no class has any ground-truth or predicted points"
        raise UndefinedMetricError(msg)
    iou = np.full(cm.num_classes, np.nan)
    iou[present] = true_positive[present] / denominator[present]
    absent = [taxonomy.CLASS_NAMES[c] for c in np.flatnonzero(~present)]
    if absent:
        logger.warning(f"classes excluded from mIoU (no points): {absent}")
    return iou, float(iou[present].mean())


def per_class_table(cm: ConfusionMatrix) -> pd.DataFrame:
    iou, _ = miou(cm)
    true_positive = np.diag(cm.counts[:, :cm.num_classes])
    return pd.DataFrame({
        'class': list(taxonomy.CLASS_NAMES[:cm.num_classes]),
        'tp': true_positive,
        'fp': cm.counts[:, :cm.num_classes].sum(axis=0) - true_positive,
        'fn': cm.counts.sum(axis=1) - true_positive,
        'iou': iou,
        'present': ~np.isnan(iou),
    })


def balanced_accuracy(source_outputs, target_outputs, threshold=0.5) -> float:
    """ mean of the per-domain hit rates of a discriminator reading P(source) """
    source_outputs = np.asarray(source_outputs, dtype=np.float64)
    target_outputs = np.asarray(target_outputs, dtype=np.float64)
    if len(source_outputs) == 0 or len(target_outputs) == 0:
        msg = f"balanced accuracy needs both domains, got {len(source_outputs)} and {len(target_outputs)}"
        raise UndefinedMetricError(msg)
    source_hits = float(np.mean(source_outputs > threshold))
    target_hits = float(np.mean(target_outputs <= threshold))
    return 0.5 * (source_hits + target_hits)
