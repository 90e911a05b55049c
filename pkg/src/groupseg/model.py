"""Full dual-tower model: visual encoder, text encoder, joint-space
projections, the one-layer completion decoder, and the learnable
contrastive temperature.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .text import TextConfig, TextEmbedding, TextEncoder
from .vision import GroupState, TransformerBlock, VisualConfig, VisualEncoder, init_truncated_normal


@dataclass
class LossConfig:
    temperature_init: float = 0.07
    learnable_temperature: bool = True
    joint_dim: int = 256
    lam: float = 0.1
    lambda_start_epoch: int = 30
    selection_ratio: float = 0.5
    mask_threshold: float = 0.65
    ema_coef: float = 0.99

    def __post_init__(self):
        if not 0 < self.selection_ratio <= 1:
            raise ValueError("selection_ratio must be in (0, 1]")
        if not 0 < self.mask_threshold < 1:
            raise ValueError("mask_threshold must be in (0, 1)")
        if not 0 <= self.ema_coef < 1:
            raise ValueError("ema_coef must be in [0, 1)")
        if self.temperature_init <= 0:
            raise ValueError("temperature must be > 0")


class CompletionDecoder(nn.Module):
    """One transformer decoder layer: the masked-caption sequence queries the
    group tokens through cross-attention, then a feed-forward network."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.proj_q = nn.Linear(dim, dim)
        self.proj_k = nn.Linear(dim, dim)
        self.proj_v = nn.Linear(dim, dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, text_seq: torch.Tensor, groups: torch.Tensor) -> torch.Tensor:
        q = self.proj_q(text_seq)  # (B, M, D)
        k = self.proj_k(groups)  # (B, K, D)
        v = self.proj_v(groups)
        h = self.norm1(q)
        sa, _ = self.self_attn(h, h, h, need_weights=False)
        x = q + sa
        ca, _ = self.cross_attn(self.norm2(x), k, v, need_weights=False)
        x = x + ca
        x = x + self.mlp(self.norm3(x))
        return x


class GroupSegModel(nn.Module):
    """Dual-tower model aligned in a shared joint embedding space."""

    def __init__(self, visual_cfg: VisualConfig, text_cfg: TextConfig, loss_cfg: LossConfig):
        super().__init__()
        if visual_cfg.embed_dim != text_cfg.embed_dim:
            raise ValueError("visual and text embed_dim must match")
        self.visual_cfg = visual_cfg
        self.text_cfg = text_cfg
        self.loss_cfg = loss_cfg
        d = visual_cfg.embed_dim
        self.visual = VisualEncoder(visual_cfg)
        self.text = TextEncoder(text_cfg)
        self.visual_proj = nn.Linear(d, loss_cfg.joint_dim)
        self.text_proj = nn.Linear(d, loss_cfg.joint_dim)
        self.decoder = CompletionDecoder(d, text_cfg.heads, text_cfg.mlp_ratio)
        init_truncated_normal(self.visual_proj)
        init_truncated_normal(self.text_proj)
        init_truncated_normal(self.decoder)
        log_t = math.log(loss_cfg.temperature_init)
        if loss_cfg.learnable_temperature:
            self.log_temperature = nn.Parameter(torch.tensor(log_t))
        else:
            self.register_buffer("log_temperature", torch.tensor(log_t))

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp().clamp(min=1e-3)

    def encode_image(self, images: torch.Tensor, keep_intermediate: bool = False) -> GroupState:
        return self.visual(images, keep_intermediate=keep_intermediate)

    def encode_text(self, token_ids: torch.Tensor) -> TextEmbedding:
        return self.text(token_ids)

    def project_visual(self, groups: torch.Tensor) -> torch.Tensor:
        """Mean over group tokens, project to joint space, L2-normalize."""
        z = self.visual_proj(groups.mean(dim=-2))
        norms = z.norm(dim=-1, keepdim=True)
        if (norms == 0).any():
            raise ValueError("degenerate embedding")
        return z / norms

    def project_groups(self, groups: torch.Tensor) -> torch.Tensor:
        """Project each group token individually, L2-normalize rows."""
        z = self.visual_proj(groups)
        return F.normalize(z, dim=-1, eps=1e-8)

    def project_text(self, eot_vector: torch.Tensor) -> torch.Tensor:
        z = self.text_proj(eot_vector)
        norms = z.norm(dim=-1, keepdim=True)
        if (norms == 0).any():
            raise ValueError("degenerate embedding")
        return z / norms

    def complete_masked_entities(self, masked_seq: torch.Tensor, groups: torch.Tensor) -> torch.Tensor:
        """Fill masked entity positions by querying the group tokens."""
        return self.decoder(masked_seq, groups)


def make_momentum_model(model: GroupSegModel) -> GroupSegModel:
    """Shadow copy that only ever updates through the moving average."""
    momentum = copy.deepcopy(model)
    for p in momentum.parameters():
        p.requires_grad_(False)
    return momentum


@torch.no_grad()
def ema_update(momentum: GroupSegModel, online: GroupSegModel, m: float) -> None:
    """theta_mom <- m * theta_mom + (1 - m) * theta_online, every parameter."""
    online_params = dict(online.named_parameters())
    for name, p_mom in momentum.named_parameters():
        p_on = online_params[name]
        if p_mom.shape != p_on.shape:
            raise ValueError(f"shape mismatch for {name}")
        p_mom.mul_(m).add_((1.0 - m) * p_on)
    online_buffers = dict(online.named_buffers())
    for name, b_mom in momentum.named_buffers():
        b_mom.copy_(online_buffers[name])
