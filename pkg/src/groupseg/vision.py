"""Visual encoder: patch embedding, two transformer stages, and the
slot-attention binding module that assigns patches to learnable group tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class VisualConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_groups: int = 8
    layers_stage1: int = 2
    layers_stage2: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    # scale binding logits by 1/sqrt(D); raw dot product when off
    scaled_binding: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.num_groups < 1:
            raise ValueError("num_groups must be >= 1")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class GroupState:
    """One visual forward pass: group tokens, image tokens, patch-to-group affinity."""

    groups: torch.Tensor  # (B, K, D)
    image_tokens: torch.Tensor  # (B, L, D)
    affinity: torch.Tensor  # (B, L, K), rows sum to 1
    intermediate: tuple[torch.Tensor, torch.Tensor] | None = None


def init_truncated_normal(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Conv2d):
            nn.init.trunc_normal_(m.weight, std=std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.trunc_normal_(m.weight, std=std)
        elif isinstance(m, nn.MultiheadAttention):
            nn.init.trunc_normal_(m.in_proj_weight, std=std)
            nn.init.zeros_(m.in_proj_bias)
            nn.init.trunc_normal_(m.out_proj.weight, std=std)
            nn.init.zeros_(m.out_proj.bias)


class TransformerBlock(nn.Module):
    """Pre-norm block: MHSA then a feed-forward network."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor, key_padding_mask: torch.Tensor | None = None) -> torch.Tensor:
        h = self.norm1(x)
        attn_out, _ = self.attn(h, h, h, key_padding_mask=key_padding_mask, need_weights=False)
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x


class BindingModule(nn.Module):
    """Slot attention: softmax over groups per patch, then weighted pooling.

    The pooling denominator carries an epsilon so a group attracting no
    weight still yields finite values and gradients.
    """

    def __init__(self, dim: int, scaled: bool = False, eps: float = 1e-8):
        super().__init__()
        self.proj_q = nn.Linear(dim, dim)
        self.proj_k = nn.Linear(dim, dim)
        self.proj_v = nn.Linear(dim, dim)
        self.proj_o = nn.Linear(dim, dim)
        self.scaled = scaled
        self.eps = eps

    def forward(self, groups: torch.Tensor, tokens: torch.Tensor):
        q = self.proj_q(groups)  # (B, K, D)
        k = self.proj_k(tokens)  # (B, L, D)
        v = self.proj_v(tokens)
        logits = k @ q.transpose(-1, -2)  # (B, L, K)
        if self.scaled:
            logits = logits / math.sqrt(q.shape[-1])
        affinity = F.softmax(logits, dim=-1)
        weights = affinity / (affinity.sum(dim=-2, keepdim=True) + self.eps)
        pooled = weights.transpose(-1, -2) @ v  # (B, K, D)
        return affinity, groups + self.proj_o(pooled)


class VisualEncoder(nn.Module):
    def __init__(self, cfg: VisualConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_proj = nn.Conv2d(3, d, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches, d))
        self.group_tokens = nn.Parameter(torch.zeros(1, cfg.num_groups, d))
        self.stage1 = nn.ModuleList(
            TransformerBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers_stage1)
        )
        self.binding = BindingModule(d, scaled=cfg.scaled_binding)
        self.stage2 = nn.ModuleList(
            TransformerBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers_stage2)
        )
        self.norm = nn.LayerNorm(d)
        init_truncated_normal(self)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.group_tokens, std=0.02)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, L, D) patch tokens with position encoding."""
        b, c, h, w = images.shape
        if c != 3 or h != self.cfg.image_size or w != self.cfg.image_size:
            raise ValueError(
                f"expected (B, 3, {self.cfg.image_size}, {self.cfg.image_size}), got {tuple(images.shape)}"
            )
        tokens = self.patch_proj(images).flatten(2).transpose(1, 2)  # (B, L, D)
        return tokens + self.pos_embed

    def _run_stage(self, blocks, groups, tokens):
        k = groups.shape[1]
        x = torch.cat([groups, tokens], dim=1)
        for blk in blocks:
            x = blk(x)
        return x[:, :k], x[:, k:]

    def encode_stage1(self, groups, tokens):
        return self._run_stage(self.stage1, groups, tokens)

    def encode_stage2(self, groups, tokens):
        return self._run_stage(self.stage2, groups, tokens)

    def bind(self, groups, tokens):
        return self.binding(groups, tokens)

    def forward(self, images: torch.Tensor, keep_intermediate: bool = False) -> GroupState:
        tokens = self.patchify(images)
        groups = self.group_tokens.expand(images.shape[0], -1, -1)
        g1, i1 = self.encode_stage1(groups, tokens)
        affinity, g_bind = self.bind(g1, i1)
        g2, i2 = self.encode_stage2(g_bind, i1)
        g2 = self.norm(g2)
        i2 = self.norm(i2)
        return GroupState(
            groups=g2,
            image_tokens=i2,
            affinity=affinity,
            intermediate=(g1, i1) if keep_intermediate else None,
        )
