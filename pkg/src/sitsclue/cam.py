"""Class activation maps from dense tokens, fusion, filtering and pseudo masks.

All maps are laid out ``[..., N, K]`` (positions by classes) with an
optional leading batch dimension.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from . import IGNORE
from .errors import ConfigError, ContractError

CAM_SOURCES = ("temporal", "spatial", "fused")


@dataclass(frozen=True)
class FilterThresholds:
    mu_low: float = 0.2
    mu_high: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.mu_low < self.mu_high <= 1.0:
            raise ConfigError(f"need 0 <= mu_low < mu_high <= 1, got ({self.mu_low}, {self.mu_high})")


@dataclass
class CamStack:
    cam_temporal: torch.Tensor
    cam_spatial: torch.Tensor
    cam_fused: torch.Tensor
    cam_filtered: torch.Tensor | None = None
    cam_propagated: torch.Tensor | None = None
    cb_cam: torch.Tensor | None = None


def dense_scores(dense_tokens, weights, layout="temporal"):
    """Pre-ReLU per-position class scores ``w_k . token(i, k)`` as [..., N, K].

    ``layout='temporal'`` expects tokens [..., N, K, d]; ``'spatial'`` expects
    [..., K, N, d].
    """
    if layout == "spatial":
        dense_tokens = dense_tokens.transpose(-3, -2)
    elif layout != "temporal":
        raise ContractError(f"unknown layout {layout!r}")
    if dense_tokens.shape[-2:] != weights.shape:
        raise ContractError(f"tokens {tuple(dense_tokens.shape)} incompatible with weights {tuple(weights.shape)}")
    return (dense_tokens * weights).sum(-1)


def dense_cam(dense_tokens, weights, layout="temporal"):
    return torch.relu(dense_scores(dense_tokens, weights, layout))


def normalize_cam(raw):
    """Per-class min-max over positions; a constant channel maps to zeros."""
    lo = raw.amin(dim=-2, keepdim=True)
    hi = raw.amax(dim=-2, keepdim=True)
    span = hi - lo
    ok = span > 0
    return torch.where(ok, (raw - lo) / torch.where(ok, span, torch.ones_like(span)), torch.zeros_like(raw))


def fuse_cams(cam_temporal, cam_spatial, source="fused", renormalize=True):
    if cam_temporal.shape != cam_spatial.shape:
        raise ContractError(f"shape mismatch {tuple(cam_temporal.shape)} vs {tuple(cam_spatial.shape)}")
    if source == "temporal":
        return cam_temporal
    if source == "spatial":
        return cam_spatial
    if source != "fused":
        raise ConfigError(f"cam source must be one of {CAM_SOURCES}, got {source!r}")
    fused = 0.5 * (cam_temporal + cam_spatial)
    return normalize_cam(fused) if renormalize else fused


def _present_mask(image_labels, like):
    """Broadcast [..., K] labels against a [..., N, K] map."""
    lab = torch.as_tensor(image_labels, device=like.device)
    return (lab > 0).unsqueeze(-2).expand_as(like)


def filter_cam(cam, thresholds, image_labels):
    """Tri-state map: 0 (reliable background), 1 (reliable foreground), IGNORE."""
    if not isinstance(thresholds, FilterThresholds):
        thresholds = FilterThresholds(*thresholds)
    out = torch.full(cam.shape, IGNORE, dtype=torch.uint8, device=cam.device)
    out[cam <= thresholds.mu_low] = 0
    out[cam >= thresholds.mu_high] = 1
    out[~_present_mask(image_labels, cam)] = IGNORE
    return out


def pseudo_mask(cam, theta_bg, image_labels=None):
    """Per-position label in 0..K; 0 when no present class exceeds ``theta_bg``.

    Ties go to the lowest class index.
    """
    cam = cam.detach()
    if image_labels is not None:
        cam = torch.where(_present_mask(image_labels, cam), cam, torch.zeros_like(cam))
    best, idx = cam.max(dim=-1)
    # torch.max returns the first maximal index on ties
    return torch.where(best > theta_bg, idx + 1, torch.zeros_like(idx))


def bce(logits, image_labels):
    return F.binary_cross_entropy_with_logits(logits, torch.as_tensor(image_labels, dtype=logits.dtype))


def aux_cls_loss(scores, image_labels):
    """Sum over sources of BCE on position-averaged pre-ReLU dense scores.

    ``scores`` is one [..., N, K] tensor or a sequence of them.
    """
    if torch.is_tensor(scores):
        scores = [scores]
    return sum(bce(s.mean(dim=-2), image_labels) for s in scores)


def compute_cams(outputs, weights, source="fused", renormalize=True):
    """Raw CAM stack from encoder outputs; returns (CamStack, [temporal, spatial] pre-ReLU scores)."""
    s_t = dense_scores(outputs.z_t_dense, weights, "temporal")
    s_s = dense_scores(outputs.z_s_dense, weights, "spatial")
    cam_t = normalize_cam(torch.relu(s_t))
    cam_s = normalize_cam(torch.relu(s_s))
    fused = fuse_cams(cam_t, cam_s, source, renormalize)
    return CamStack(cam_t, cam_s, fused), [s_t, s_s]
