"""Confusion-matrix segmentation metrics (rows = ground truth, cols = prediction)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, EvaluationError


@dataclass
class EvalReport:
    confusion: np.ndarray
    oa: float
    miou: float
    recall: np.ndarray
    precision: np.ndarray
    iou: np.ndarray
    fdr: np.ndarray
    include_background: bool = True
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "oa": self.oa,
            "miou": self.miou,
            "recall": self.recall.tolist(),
            "precision": self.precision.tolist(),
            "iou": self.iou.tolist(),
            "fdr": self.fdr.tolist(),
            "confusion": self.confusion.tolist(),
            "include_background": self.include_background,
            **self.extra,
        }

    def to_text(self):
        lines = [f"oa {self.oa:.6f}", f"miou {self.miou:.6f}"]
        for name in ("recall", "precision", "iou", "fdr"):
            lines.append(f"{name} " + " ".join(f"{v:.6f}" for v in getattr(self, name)))
        lines.append("")
        lines.append("class  fdr       iou       recall    precision")
        for k in range(len(self.iou)):
            lines.append(
                f"{k:<6d} {self.fdr[k]:.6f}  {self.iou[k]:.6f}  {self.recall[k]:.6f}  {self.precision[k]:.6f}"
            )
        return "\n".join(lines) + "\n"

    def write(self, stem):
        """Write ``stem.txt`` (human-readable) and ``stem.json`` (key-value)."""
        with open(f"{stem}.txt", "w", encoding="utf-8") as fh:
            fh.write(self.to_text())
        with open(f"{stem}.json", "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def new_confusion(n_classes):
    return np.zeros((n_classes, n_classes), dtype=np.int64)


def accumulate(confusion, pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"pred {pred.shape} and gt {gt.shape} differ")
    n = confusion.shape[0]
    if pred.size == 0:
        return confusion
    p = pred.ravel().astype(np.int64)
    g = gt.ravel().astype(np.int64)
    if p.min() < 0 or g.min() < 0 or p.max() >= n or g.max() >= n:
        raise ContractError(f"labels must lie in 0..{n - 1}")
    confusion += np.bincount(g * n + p, minlength=n * n).reshape(n, n)
    return confusion


def _ratio(num, den, empty=0.0):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), empty)


def finalize(confusion, include_background=True):
    cm = np.asarray(confusion, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise EvaluationError("empty confusion matrix")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    union = tp + fp + fn
    iou = _ratio(tp, union)
    valid = union > 0
    if not include_background:
        valid[0] = False
    miou = float(iou[valid].mean()) if valid.any() else 0.0
    return EvalReport(
        confusion=cm,
        oa=float(tp.sum() / total),
        miou=miou,
        recall=_ratio(tp, tp + fn),
        precision=_ratio(tp, tp + fp),
        iou=iou,
        fdr=_ratio(fp, fp + tp),
        include_background=include_background,
    )


def evaluate(preds, gts, n_classes, include_background=True):
    cm = new_confusion(n_classes)
    for p, g in zip(preds, gts):
        accumulate(cm, p, g)
    return finalize(cm, include_background)


def supervision_ratio(weak_miou, full_miou):
    if full_miou <= 0:
        raise EvaluationError("fully supervised mIoU must be positive for a ratio")
    return weak_miou / full_miou
