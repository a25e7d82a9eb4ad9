"""End-to-end experiment drivers shared by the CLI, scripts and acceptance tests."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import generate_sample
from .metrics import supervision_ratio
from .training import generate_pseudo_labels, train_classifier, train_segmentation

log = logging.getLogger(__name__)

# (row name, training-flag overrides, pseudo-label mode); the last two rows share one classifier
ABLATION_ROWS = (
    ("baseline", {"disable_cbl": True, "disable_tap": True}, "raw_cam"),
    ("+tap", {"disable_cbl": True}, "raw_cam"),
    ("+cbl+tap", {}, "raw_cam"),
    ("full", {}, "cb_cam"),
)


@dataclass
class SplitArrays:
    series: np.ndarray
    masks: np.ndarray
    labels: np.ndarray
    ids: list


def synth_arrays(synth_cfg, n, split):
    samples = [generate_sample(synth_cfg, i, split) for i in range(n)]
    return SplitArrays(
        np.stack([s.series for s in samples]),
        np.stack([s.mask.astype(np.int64) for s in samples]),
        np.stack([s.image_labels for s in samples]).astype(np.float32),
        [s.sample_id for s in samples],
    )


@dataclass
class AblationRow:
    name: str
    cbl: bool
    tap: bool
    cbcam: bool
    report: object

    def to_dict(self):
        r = self.report
        return {
            "name": self.name,
            "cbl": self.cbl,
            "tap": self.tap,
            "cb_cam": self.cbcam,
            "recall": float(np.mean(r.recall)),
            "oa": r.oa,
            "miou": r.miou,
        }


@dataclass
class AblationResult:
    rows: list
    runs: dict = field(default_factory=dict)  # flag-key -> ClassifierRun
    masks: dict = field(default_factory=dict)  # row name -> pseudo masks

    def table(self):
        lines = [f"{'row':<10} {'cbl':>4} {'tap':>4} {'cbcam':>6} {'recall':>8} {'oa':>8} {'miou':>8}"]
        for row in self.rows:
            d = row.to_dict()
            lines.append(
                f"{d['name']:<10} {int(d['cbl']):>4} {int(d['tap']):>4} {int(d['cb_cam']):>6} "
                f"{100 * d['recall']:>8.2f} {100 * d['oa']:>8.2f} {100 * d['miou']:>8.2f}"
            )
        return "\n".join(lines) + "\n"

    def miou(self, name):
        return next(r.report.miou for r in self.rows if r.name == name)


def run_ablation(cfg, train: SplitArrays, progress=None):
    """Train one classifier per distinct flag set and score pseudo labels for every row."""
    mcfg = cfg.model_for_data()
    result = AblationResult([])
    for name, flags, mode in ABLATION_ROWS:
        key = tuple(sorted(flags.items()))
        tcfg = dataclasses.replace(cfg.train, **flags)
        if key not in result.runs:
            log.info("ablation: training classifier for %s", name)
            result.runs[key] = train_classifier(train.series, train.labels, tcfg, mcfg, progress)
        run = result.runs[key]
        masks, report = generate_pseudo_labels(run.model, run.bank, train.series, train.labels, tcfg, mode, train.masks)
        result.masks[name] = masks
        result.rows.append(AblationRow(name, not tcfg.disable_cbl, not tcfg.disable_tap, mode == "cb_cam", report))
    return result


@dataclass
class RatioResult:
    full_miou: float
    exact_miou: float
    raw_miou: float

    @property
    def exact_ratio(self):
        return supervision_ratio(self.exact_miou, self.full_miou)

    @property
    def raw_ratio(self):
        return supervision_ratio(self.raw_miou, self.full_miou)

    def to_dict(self):
        return {
            "full_miou": self.full_miou,
            "exact_miou": self.exact_miou,
            "raw_miou": self.raw_miou,
            "exact_ratio": self.exact_ratio,
            "raw_ratio": self.raw_ratio,
        }


def run_ratio(cfg, train: SplitArrays, test: SplitArrays, exact_masks, raw_masks):
    """Segmentation on ground truth, on full-method pseudo masks and on baseline raw-CAM masks."""
    mcfg = cfg.model_for_data()
    dtype = cfg.train.dtype
    scores = {}
    for name, masks in (("full", train.masks), ("exact", exact_masks), ("raw", raw_masks)):
        log.info("ratio: segmentation on %s masks", name)
        run = train_segmentation(train.series, masks, test.series, test.masks, cfg.seg, mcfg, dtype)
        scores[name] = run.report.miou
    return RatioResult(scores["full"], scores["exact"], scores["raw"])
