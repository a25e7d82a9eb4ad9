"""Temporal-then-spatial transformer with per-class tokens.

The temporal encoder runs over each patch's time series independently with
K class tokens prepended; its first K output tokens become the patch tokens
of K independent spatial sequences (one per class), each with its own
spatial class token.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError


@dataclass
class ModelConfig:
    d: int = 128
    temporal_layers: int = 8
    spatial_layers: int = 4
    heads: int = 4
    patch_h: int = 2
    patch_w: int = 2
    K: int = 4
    T: int = 12
    C: int = 4
    H: int = 16
    W: int = 16
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("d", "heads", "K", "T", "C", "patch_h", "patch_w"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.temporal_layers < 0 or self.spatial_layers < 0:
            raise ConfigError("layer counts must be >= 0")
        if self.H % self.patch_h or self.W % self.patch_w:
            raise ConfigError(
                f"image {self.H}x{self.W} not divisible by patch {self.patch_h}x{self.patch_w}"
            )
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")

    @property
    def grid(self):
        return self.H // self.patch_h, self.W // self.patch_w

    @property
    def n_patches(self):
        nh, nw = self.grid
        return nh * nw

    def to_dict(self):
        return asdict(self)


@dataclass
class EncoderOutputs:
    z_t_dense: torch.Tensor  # [B, N, K, d]
    z_t_seq: torch.Tensor  # [B, N, T, d]
    z_s_dense: torch.Tensor  # [B, K, N, d]
    z_s_global: torch.Tensor  # [B, K, d]
    attention: list  # per temporal layer: [B, N, heads, K+T, K+T]

    @property
    def t2c_attention_raw(self):
        """Last-layer class-query / temporal-key block, head-averaged: [B, N, K, T]."""
        K = self.z_t_dense.shape[2]
        return self.attention[-1].mean(dim=2)[..., :K, K:]


class Attention(nn.Module):
    def __init__(self, d, heads, dropout=0.0):
        super().__init__()
        self.heads = heads
        self.scale = (d // heads) ** -0.5
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        B, L, d = x.shape
        qkv = self.qkv(x).reshape(B, L, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (self.drop(attn) @ v).transpose(1, 2).reshape(B, L, d)
        return self.proj(out), attn


class Block(nn.Module):
    """Pre-norm transformer block, GELU MLP with expansion 4."""

    def __init__(self, d, heads, dropout=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = Attention(d, heads, dropout)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(
            nn.Linear(d, 4 * d), nn.GELU(), nn.Dropout(dropout), nn.Linear(4 * d, d), nn.Dropout(dropout)
        )

    def forward(self, x):
        h, attn = self.attn(self.norm1(x))
        x = x + h
        x = x + self.mlp(self.norm2(x))
        return x, attn


class TSViT(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        self.patch_embed = nn.Linear(c.C * c.patch_h * c.patch_w, c.d)
        self.temporal_pos = nn.Parameter(torch.randn(c.T, c.d) * 0.02)
        # one [K, d] table shared by all patches
        self.temporal_cls = nn.Parameter(torch.randn(c.K, c.d) * 0.02)
        self.temporal_blocks = nn.ModuleList(Block(c.d, c.heads, c.dropout) for _ in range(c.temporal_layers))
        self.temporal_norm = nn.LayerNorm(c.d)
        self.spatial_pos = nn.Parameter(torch.randn(c.n_patches, c.d) * 0.02)
        self.spatial_cls = nn.Parameter(torch.randn(c.K, c.d) * 0.02)
        self.spatial_blocks = nn.ModuleList(Block(c.d, c.heads, c.dropout) for _ in range(c.spatial_layers))
        self.spatial_norm = nn.LayerNorm(c.d)
        self.classifier = nn.Parameter(torch.randn(c.K, c.d) * (1.0 / math.sqrt(c.d)))
        # per-channel input standardization, fitted on the training split
        self.register_buffer("input_mean", torch.zeros(c.C))
        self.register_buffer("input_std", torch.ones(c.C))

    @torch.no_grad()
    def fit_input_stats(self, series):
        x = torch.as_tensor(series, dtype=self.input_mean.dtype)
        dims = (0, 1, 3, 4) if x.dim() == 5 else (0, 2, 3)
        self.input_mean.copy_(x.mean(dim=dims))
        self.input_std.copy_(x.std(dim=dims).clamp(min=1e-6))

    # -- stages -------------------------------------------------------------

    def patchify(self, x):
        """[B, T, C, H, W] -> [B, N, T, d] patch tokens (N = Nh*Nw, row-major)."""
        x = (x - self.input_mean[:, None, None]) / self.input_std[:, None, None]
        return patchify(x, self.patch_embed, self.config)

    def temporal_forward(self, Z, positions=None):
        """Returns (z_t_dense [B,N,K,d], z_t_seq [B,N,T,d], per-layer attention list).

        ``positions`` optionally indexes the temporal embedding table (e.g. by
        acquisition date bucket); defaults to timestep order.
        """
        B, N, T, d = Z.shape
        K = self.config.K
        pos = self.temporal_pos[:T] if positions is None else self.temporal_pos[positions]
        x = Z + pos
        cls = self.temporal_cls.expand(B, N, K, d)
        x = torch.cat([cls, x], dim=2).reshape(B * N, K + T, d)
        attention = []
        for blk in self.temporal_blocks:
            x, a = blk(x)
            attention.append(a.reshape(B, N, *a.shape[1:]))
        x = self.temporal_norm(x).reshape(B, N, K + T, d)
        return x[:, :, :K], x[:, :, K:], attention

    def spatial_forward(self, z_t_dense):
        """[B, N, K, d] -> (z_s_global [B,K,d], z_s_dense [B,K,N,d])."""
        B, N, K, d = z_t_dense.shape
        if N != self.config.n_patches or K != self.config.K:
            raise ContractError(f"expected [B,{self.config.n_patches},{self.config.K},d], got {tuple(z_t_dense.shape)}")
        x = z_t_dense.permute(0, 2, 1, 3) + self.spatial_pos
        cls = self.spatial_cls[None, :, None, :].expand(B, K, 1, d)
        x = torch.cat([cls, x], dim=2).reshape(B * K, 1 + N, d)
        for blk in self.spatial_blocks:
            x, _ = blk(x)
        x = self.spatial_norm(x).reshape(B, K, 1 + N, d)
        return x[:, :, 0], x[:, :, 1:]

    def forward(self, x, positions=None):
        Z = self.patchify(x)
        z_t_dense, z_t_seq, attention = self.temporal_forward(Z, positions)
        z_s_global, z_s_dense = self.spatial_forward(z_t_dense)
        return EncoderOutputs(z_t_dense, z_t_seq, z_s_dense, z_s_global, attention)


def patchify(x, proj, config):
    if x.dim() == 4:
        x = x.unsqueeze(0)
    B, T, C, H, W = x.shape
    ph, pw = config.patch_h, config.patch_w
    if H % ph or W % pw:
        raise ConfigError(f"image {H}x{W} not divisible by patch {ph}x{pw}")
    nh, nw = H // ph, W // pw
    x = x.reshape(B, T, C, nh, ph, nw, pw).permute(0, 3, 5, 1, 2, 4, 6)
    x = x.reshape(B, nh * nw, T, C * ph * pw)
    return proj(x)


def classify_global(z_s_global, weights):
    """Per-class logits: logit_k = w_k . token_k (no bias)."""
    if z_s_global.shape[-2:] != weights.shape:
        raise ContractError(f"tokens {tuple(z_s_global.shape)} vs weights {tuple(weights.shape)}")
    return (z_s_global * weights).sum(-1)


def unpatchify_labels(patch_labels, config):
    """Nearest upsampling of per-patch values [..., N] to [..., H, W]."""
    nh, nw = config.grid
    x = patch_labels.reshape(*patch_labels.shape[:-1], nh, nw)
    x = x.repeat_interleave(config.patch_h, dim=-2).repeat_interleave(config.patch_w, dim=-1)
    return x


class SegmentationHead(nn.Module):
    """(K+1)-way per-patch logits from the per-class spatial dense tokens.

    Foreground class k is scored from its own token stream; background from
    the class-averaged token.
    """

    def __init__(self, K, d):
        super().__init__()
        self.fg_weight = nn.Parameter(torch.randn(K, d) / math.sqrt(d))
        self.fg_bias = nn.Parameter(torch.zeros(K))
        self.bg = nn.Linear(d, 1)

    def forward(self, z_s_dense):
        # z_s_dense: [B, K, N, d] -> [B, K+1, N]
        fg = torch.einsum("bknd,kd->bkn", z_s_dense, self.fg_weight) + self.fg_bias[None, :, None]
        bg = self.bg(z_s_dense.mean(dim=1)).squeeze(-1)[:, None]
        return torch.cat([bg, fg], dim=1)


class SegmentationNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = TSViT(config)
        self.head = SegmentationHead(config.K, config.d)

    def forward(self, x):
        out = self.backbone(x)
        logits = self.head(out.z_s_dense)  # [B, K+1, N]
        nh, nw = self.config.grid
        logits = logits.reshape(*logits.shape[:2], nh, nw)
        return F.interpolate(logits, scale_factor=(self.config.patch_h, self.config.patch_w), mode="nearest")
