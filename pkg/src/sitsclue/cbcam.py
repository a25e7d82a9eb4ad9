"""Clue-based CAMs: per-position class evidence from the prototype bank
instead of classifier weights.
"""
from __future__ import annotations

import torch

from .cam import normalize_cam
from .clues import similarity_matrix
from .errors import GenerationError


def cb_cam_raw(z_t_dense, bank, tau, image_labels, class_agnostic=False):
    """ReLU(max_pos S(z, p+) - max_neg S(z, p-)) per position and class, before normalization.

    ``z_t_dense`` is [..., N, K, d]. Class k is scored with the class-k token
    slice (or the class-mean token when ``class_agnostic``). An empty negative
    set contributes 0; absent classes are all-zero.
    """
    labels = torch.as_tensor(image_labels)
    present = labels > 0
    out_shape = z_t_dense.shape[:-1]
    Y = torch.zeros(out_shape, dtype=z_t_dense.dtype, device=z_t_dense.device)
    any_present = present.reshape(-1, bank.K).any(dim=0)
    for k in range(bank.K):
        if not any_present[k]:
            continue
        pos_flags = bank.initialized["positive"][k]
        if not pos_flags.any():
            raise GenerationError(f"prototype bank has no positive clue for class {k + 1}")
        z = z_t_dense.mean(dim=-2) if class_agnostic else z_t_dense[..., k, :]
        flat = z.reshape(-1, z.shape[-1])
        pos = similarity_matrix(flat, bank.positive[k][pos_flags].to(flat.dtype), tau).amax(dim=1)
        neg_flags = bank.initialized["negative"][k]
        if neg_flags.any():
            neg = similarity_matrix(flat, bank.negative[k][neg_flags].to(flat.dtype), tau).amax(dim=1)
        else:
            neg = torch.zeros_like(pos)
        Y[..., k] = torch.relu(pos - neg).reshape(z.shape[:-1])
    mask = present.unsqueeze(-2).expand_as(Y)
    return torch.where(mask, Y, torch.zeros_like(Y))


def cb_cam(z_t_dense, bank, tau, image_labels, class_agnostic=False, normalize=True):
    """Clue-based CAM [..., N, K], min-max normalized per class unless ``normalize=False``."""
    Y = cb_cam_raw(z_t_dense, bank, tau, image_labels, class_agnostic)
    return normalize_cam(Y) if normalize else Y
