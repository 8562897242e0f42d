"""Segmentation (mIoU, mFSc) and correspondence (EPE, D1) metrics."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyMaskWarning


@dataclass
class MetricReport:
    miou: float = 0.0
    mfsc: float = 0.0
    epe: float = 0.0
    d1: float = 0.0
    per_class_iou: list = field(default_factory=list)
    pixel_count: int = 0

    def to_lines(self):
        lines = [
            f"miou={self.miou:.6f}",
            f"mfsc={self.mfsc:.6f}",
            f"epe={self.epe:.6f}",
            f"d1={self.d1:.6f}",
            f"pixel_count={self.pixel_count}",
            "[per_class_iou]",
        ]
        for c, v in enumerate(self.per_class_iou):
            lines.append(f"class_{c}={'nan' if np.isnan(v) else f'{v:.6f}'}")
        return "\n".join(lines) + "\n"


def confusion_matrix(pred, gt, num_classes):
    pred = np.asarray(pred).ravel().astype(np.int64)
    gt = np.asarray(gt).ravel().astype(np.int64)
    return np.bincount(gt * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def seg_metrics(pred, gt, num_classes=None):
    """Returns (miou %, mfsc %, per-class IoU %) averaging over classes present in gt.

    Classes absent from gt get NaN in the per-class vector.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if num_classes is None:
        num_classes = int(max(pred.max(initial=0), gt.max(initial=0))) + 1
    cm = confusion_matrix(pred, gt, num_classes)
    tp = np.diag(cm).astype(np.float64)
    fn = cm.sum(1) - tp
    fp = cm.sum(0) - tp
    present = cm.sum(1) > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(present, tp / (tp + fp + fn), np.nan)
        f1 = np.where(present, 2 * tp / (2 * tp + fp + fn), np.nan)
    if not present.any():
        warnings.warn("no ground-truth classes present; reporting 0", EmptyMaskWarning, stacklevel=2)
        return 0.0, 0.0, (iou * 100).tolist()
    return float(np.nanmean(iou) * 100), float(np.nanmean(f1) * 100), (iou * 100).tolist()


def corr_metrics(pred, gt, valid=None):
    """Returns (EPE px, D1 %) over valid pixels. pred, gt: (..., H, W, 2) channel-last arrays."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    err = np.linalg.norm(pred - gt, axis=-1)
    mag = np.linalg.norm(gt, axis=-1)
    mask = np.ones(err.shape, bool) if valid is None else np.asarray(valid) > 0.5
    if not mask.any():
        warnings.warn("empty validity mask; reporting zeros", EmptyMaskWarning, stacklevel=2)
        return 0.0, 0.0
    e, m = err[mask], mag[mask]
    bad = (e > 3.0) & (e > 0.05 * m)
    return float(e.mean()), float(bad.mean() * 100)
