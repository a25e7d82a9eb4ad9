"""Classifier training with the combined weak-supervision objective, pseudo
label generation, and segmentation training on pseudo labels.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import IGNORE
from .affinity import (
    extract_t2c_attention,
    low_level_features,
    pairwise_affinity,
    propagate_cam,
    reweight,
    tap_loss,
)
from .cam import FilterThresholds, aux_cls_loss, bce, compute_cams, filter_cam, pseudo_mask
from .cbcam import cb_cam
from .clues import PrototypeBank, cbl_loss, cluster_batch
from .config import SegConfig, TrainConfig, substream_seed
from .data import num_threads
from .encoder import SegmentationNet, TSViT, classify_global, unpatchify_labels
from .errors import DataError, GenerationError, TrainingDiverged
from .metrics import evaluate

log = logging.getLogger(__name__)

PSEUDO_MODES = ("raw_cam", "cb_cam")


def set_determinism():
    torch.use_deterministic_algorithms(True)
    n = num_threads()
    if n:
        torch.set_num_threads(n)


def torch_dtype(name):
    return {"float32": torch.float32, "float64": torch.float64}[name]


def total_loss(l_cls, l_cls_aux, l_cbl, l_tap, cfg, it):
    """L_cls + L_aux + lambda1*L_cbl (after warm-up) + lambda2*L_tap, with ablation switches."""
    loss = l_cls + l_cls_aux
    if not cfg.disable_cbl and it >= cfg.warmup_iters:
        loss = loss + cfg.lambda1 * l_cbl
    if not cfg.disable_tap:
        loss = loss + cfg.lambda2 * l_tap
    return loss


@dataclass
class StepResult:
    loss: torch.Tensor
    components: dict
    residuals: dict
    cams: object = None


def affinity_inputs(out, x, cfg, mcfg):
    """Per-class features [B, K, N, F] used for pairwise affinity."""
    K = mcfg.K
    if cfg.affinity_source == "low_level":
        feats = low_level_features(x, mcfg)
        return feats.unsqueeze(1).expand(-1, K, -1, -1)
    a_tilde = extract_t2c_attention([a.detach() for a in out.attention], K, cfg.attention_layer)
    return reweight(out.z_t_seq.detach(), a_tilde)


def classifier_step(model, bank, x, y, cfg: TrainConfig, it):
    """One forward pass of the training objective; updates the prototype bank in place."""
    mc = model.config
    grid = mc.grid
    out = model(x)
    w = model.classifier
    logits = classify_global(out.z_s_global, w)
    l_cls = bce(logits, y)
    cams, scores = compute_cams(out, w, cfg.cam_source, cfg.renormalize_fused)
    l_aux = aux_cls_loss(scores, y)
    M = cams.cam_fused
    filtered = filter_cam(M.detach(), FilterThresholds(cfg.mu_low, cfg.mu_high), y)
    cams.cam_filtered = filtered

    residuals = cluster_batch(bank, out.z_t_dense, filtered, y, cfg.eta, cfg.sinkhorn_iters, cfg.sinkhorn_tol)
    l_cbl, skipped = cbl_loss(out.z_t_dense, filtered, bank, y, cfg.tau, cfg.include_positive_in_denominator)

    V = affinity_inputs(out, x, cfg, mc)
    aff = pairwise_affinity(V, grid, cfg.sigma_mode)
    M_prop = propagate_cam(M.detach(), aff, grid, cfg.prop_iters)
    cams.cam_propagated = M_prop
    l_tap = tap_loss(M, M_prop, y)

    loss = total_loss(l_cls, l_aux, l_cbl, l_tap, cfg, it)
    comps = {
        "cls": l_cls.item(),
        "aux": l_aux.item(),
        "cbl": l_cbl.item(),
        "tap": l_tap.item(),
        "cbl_skipped": bool(skipped),
    }
    return StepResult(loss, comps, residuals, cams)


@dataclass
class ClassifierRun:
    model: TSViT
    bank: PrototypeBank
    log: list = field(default_factory=list)


def _batches(n, batch_size, seed):
    rng = np.random.default_rng(substream_seed(seed, "batches"))
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield perm[i : i + batch_size]


def build_model(mcfg, seed, dtype):
    torch.manual_seed(substream_seed(seed, "init"))
    return TSViT(mcfg).to(dtype)


def train_classifier(series, labels, cfg: TrainConfig, mcfg, progress=None):
    """Train the classifier on arrays series [N,T,C,H,W], labels [N,K].

    Returns the model, the prototype bank and one log record per iteration.
    """
    set_determinism()
    dtype = torch_dtype(cfg.dtype)
    model = build_model(mcfg, cfg.seed, dtype)
    model.fit_input_stats(series)
    torch.manual_seed(substream_seed(cfg.seed, "dropout"))
    bank = PrototypeBank(mcfg.K, cfg.Np, mcfg.d, cfg.alpha, cfg.tau, dtype=dtype)
    X = torch.as_tensor(np.asarray(series), dtype=dtype)
    Y = torch.as_tensor(np.asarray(labels), dtype=dtype)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.total_iters)
    batches = _batches(len(X), cfg.batch_size, cfg.seed)
    records = []
    model.train()
    for it in range(cfg.total_iters):
        idx = torch.as_tensor(next(batches))
        step = classifier_step(model, bank, X[idx], Y[idx], cfg, it)
        rec = {"iter": it, "loss": step.loss.item(), **step.components, "lr": opt.param_groups[0]["lr"]}
        rec["clustered"] = len(step.residuals)
        rec["max_residual"] = max(step.residuals.values(), default=0.0)
        if not math.isfinite(rec["loss"]):
            raise TrainingDiverged(it, {k: rec[k] for k in ("loss", "cls", "aux", "cbl", "tap")})
        opt.zero_grad(set_to_none=True)
        step.loss.backward()
        opt.step()
        sched.step()
        records.append(rec)
        if progress and (it % progress == 0 or it == cfg.total_iters - 1):
            log.info("iter %d loss %.4f cls %.4f cbl %.4f tap %.4f", it, rec["loss"], rec["cls"], rec["cbl"], rec["tap"])
    model.eval()
    return ClassifierRun(model, bank, records)


@torch.no_grad()
def forward_chunks(model, X, chunk=16):
    for i in range(0, len(X), chunk):
        yield i, model(X[i : i + chunk])


@torch.no_grad()
def classification_f1(model, series, labels):
    """Micro-averaged multilabel F1 of sigmoid(logit) > 0.5."""
    model.eval()
    dtype = next(model.parameters()).dtype
    X = torch.as_tensor(np.asarray(series), dtype=dtype)
    Y = np.asarray(labels) > 0
    preds = []
    for _, out in forward_chunks(model, X):
        preds.append((classify_global(out.z_s_global, model.classifier) > 0).numpy())
    P = np.concatenate(preds)
    tp = (P & Y).sum()
    denom = P.sum() + Y.sum()
    return float(2 * tp / denom) if denom else 1.0


@torch.no_grad()
def class_maps(model, bank, series, labels, cfg: TrainConfig, mode):
    """Normalized per-patch class maps [N_s, N, K] (absent classes zero) for a pseudo-label mode."""
    if mode not in PSEUDO_MODES:
        raise GenerationError(f"mode must be one of {PSEUDO_MODES}, got {mode!r}")
    if mode == "cb_cam" and bank is None:
        raise GenerationError("prototype bank missing")
    model.eval()
    dtype = next(model.parameters()).dtype
    X = torch.as_tensor(np.asarray(series), dtype=dtype)
    Y = torch.as_tensor(np.asarray(labels), dtype=dtype)
    maps = []
    for i, out in forward_chunks(model, X):
        y = Y[i : i + len(out.z_t_dense)]
        if mode == "raw_cam":
            cams, _ = compute_cams(out, model.classifier, cfg.cam_source, cfg.renormalize_fused)
            m = cams.cam_fused
        else:
            m = cb_cam(out.z_t_dense, bank, cfg.tau, y, cfg.class_agnostic_cbcam)
        present = (y > 0).unsqueeze(-2).expand_as(m)
        maps.append(torch.where(present, m, torch.zeros_like(m)))
    return torch.cat(maps)


def generate_pseudo_labels(model, bank, series, labels, cfg: TrainConfig, mode="cb_cam", gt_masks=None):
    """Pixel pseudo masks [N_s, H, W] (uint16) and, given ground truth, an EvalReport."""
    maps = class_maps(model, bank, series, labels, cfg, mode)
    patch = pseudo_mask(maps, cfg.theta_bg, torch.as_tensor(np.asarray(labels)))
    masks = unpatchify_labels(patch, model.config).numpy().astype(np.uint16)
    report = None
    if gt_masks is not None:
        report = evaluate(masks, np.asarray(gt_masks), model.config.K + 1)
    return masks, report


@dataclass
class SegmentationRun:
    model: SegmentationNet
    report: object
    log: list = field(default_factory=list)


def train_segmentation(series, masks, test_series, test_masks, seg: SegConfig, mcfg, dtype="float32"):
    """Train the segmentation network on (pseudo) masks; evaluate on the held-out split."""
    set_determinism()
    masks = np.asarray(masks).astype(np.int64)
    K = mcfg.K
    bad = (masks > K) & (masks != IGNORE)
    if bad.any() or (masks < 0).any():
        raise DataError(f"mask labels must lie in 0..{K} (or IGNORE={IGNORE})")
    td = torch_dtype(dtype)
    torch.manual_seed(substream_seed(seg.seed, "seg_init"))
    model = SegmentationNet(mcfg).to(td)
    model.backbone.fit_input_stats(series)
    X = torch.as_tensor(np.asarray(series), dtype=td)
    M = torch.as_tensor(masks)
    opt = torch.optim.AdamW(model.parameters(), lr=seg.lr, weight_decay=seg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=seg.iters)
    batches = _batches(len(X), seg.batch_size, substream_seed(seg.seed, "seg"))
    records = []
    model.train()
    for it in range(seg.iters):
        idx = torch.as_tensor(next(batches))
        logits = model(X[idx])
        loss = F.cross_entropy(logits, M[idx], ignore_index=IGNORE)
        if not torch.isfinite(loss):
            raise TrainingDiverged(it, {"seg": loss.item()})
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        records.append({"iter": it, "loss": loss.item()})
    model.eval()
    preds = predict_segmentation(model, test_series)
    report = evaluate(preds, np.asarray(test_masks), K + 1)
    return SegmentationRun(model, report, records)


@torch.no_grad()
def predict_segmentation(model, series, chunk=16):
    model.eval()
    dtype = next(model.parameters()).dtype
    X = torch.as_tensor(np.asarray(series), dtype=dtype)
    out = [model(X[i : i + chunk]).argmax(dim=1) for i in range(0, len(X), chunk)]
    return torch.cat(out).numpy().astype(np.uint16)
