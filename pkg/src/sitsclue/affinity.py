"""Temporal-to-class attention, temporally reweighted embeddings and local
affinity propagation over the raw CAM.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import ConfigError

# 8-way neighbourhood, centre excluded
OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
SIGMA_FLOOR = 1e-6


def extract_t2c_attention(attention_stack, K, layer="last"):
    """Ã [..., T, K]: class-query rows x temporal-key columns, softmax over T.

    ``attention_stack`` is the per-layer list from the temporal encoder, each
    [B, N, heads, K+T, K+T] (or without the batch axis). ``layer='last'`` uses
    the final layer, ``'mean'`` averages all layers.
    """
    if layer == "last":
        attn = attention_stack[-1]
    elif layer == "mean":
        attn = torch.stack(list(attention_stack)).mean(0)
    else:
        raise ConfigError(f"layer must be 'last' or 'mean', got {layer!r}")
    # average heads, then the N patch sequences
    a = attn.mean(dim=-3).mean(dim=-3)  # [..., K+T, K+T]
    block = a[..., :K, K:]  # [..., K, T]
    return torch.softmax(block.transpose(-1, -2), dim=-2)


def reweight(z_t_seq, a_tilde):
    """V^k = sum_t Ã[t, k] * z_t_seq[:, t, :]; [..., N, T, d] x [..., T, K] -> [..., K, N, d]."""
    return torch.einsum("...ntd,...tk->...knd", z_t_seq, a_tilde)


def neighbor_index(grid):
    """Flat neighbour indices [N, 8] and validity mask [N, 8] on an nh x nw grid."""
    nh, nw = grid
    rows = torch.arange(nh).repeat_interleave(nw)
    cols = torch.arange(nw).repeat(nh)
    idx, valid = [], []
    for dr, dc in OFFSETS:
        r, c = rows + dr, cols + dc
        ok = (r >= 0) & (r < nh) & (c >= 0) & (c < nw)
        idx.append(torch.where(ok, r * nw + c, torch.zeros_like(r)))
        valid.append(ok)
    return torch.stack(idx, 1), torch.stack(valid, 1)


def pairwise_affinity(v, grid, sigma="entry_std"):
    """exp(cos(v_i, v_j) / sigma_i) over the 8 neighbours of each position.

    ``v`` is [..., N, d]; returns [..., N, 8] with zeros at missing
    (off-grid) neighbours. ``sigma='entry_std'`` takes the std of the entries
    of v_i; ``'neighbor_std'`` the std of its neighbour cosines.
    """
    idx, valid = neighbor_index(grid)
    idx, valid = idx.to(v.device), valid.to(v.device)
    vn = F.normalize(v, dim=-1)
    nbrs = vn[..., idx, :]  # [..., N, 8, d]
    cos = (vn.unsqueeze(-2) * nbrs).sum(-1)  # [..., N, 8]
    if sigma == "entry_std":
        s = v.std(dim=-1, unbiased=False)
    elif sigma == "neighbor_std":
        c = cos.masked_fill(~valid, 0.0)
        n = valid.sum(-1).clamp(min=1)
        mean = c.sum(-1) / n
        s = (((c - mean.unsqueeze(-1)) ** 2).masked_fill(~valid, 0.0).sum(-1) / n).sqrt()
    else:
        raise ConfigError(f"unknown sigma mode {sigma!r}")
    s = s.clamp(min=SIGMA_FLOOR).unsqueeze(-1)
    aff = torch.exp(cos / s)
    return aff.masked_fill(~valid, 0.0)


def propagate(cam, affinity, grid, iters=3):
    """Iterated neighbour averaging of a map [..., N] weighted by affinity [..., N, 8]."""
    if iters < 1:
        raise ConfigError("iters must be >= 1")
    idx, _ = neighbor_index(grid)
    idx = idx.to(cam.device)
    norm = affinity.sum(-1)
    isolated = norm <= 0
    safe = torch.where(isolated, torch.ones_like(norm), norm)
    out = cam
    for _ in range(iters):
        # positions without neighbours (1x1 grid) keep their value
        out = torch.where(isolated, out, (affinity * out[..., idx]).sum(-1) / safe)
    return out


def propagate_cam(cam, affinity, grid, iters=3):
    """Propagate a [..., N, K] CAM with per-class affinities [..., K, N, 8]."""
    m = cam.transpose(-1, -2)  # [..., K, N]
    return propagate(m, affinity, grid, iters).transpose(-1, -2)


def tap_loss(cam, cam_propagated, image_labels):
    """Sum over present classes of mean |M̃ - M| over positions; M̃ is a fixed target.

    Maps are [..., N, K]; with a batch axis the result is averaged over images.
    """
    diff = (cam_propagated.detach() - cam).abs().mean(dim=-2)  # [..., K]
    present = (torch.as_tensor(image_labels) > 0).to(diff.dtype)
    per_image = (diff * present).sum(-1)
    return per_image.mean() if per_image.dim() else per_image


def low_level_features(series, config):
    """Raw per-patch pixel values flattened over time: [B, N, T*C*ph*pw]."""
    if series.dim() == 4:
        series = series.unsqueeze(0)
    B, T, C, H, W = series.shape
    ph, pw = config.patch_h, config.patch_w
    nh, nw = H // ph, W // pw
    x = series.reshape(B, T, C, nh, ph, nw, pw).permute(0, 3, 5, 1, 2, 4, 6)
    return x.reshape(B, nh * nw, T * C * ph * pw)
