"""Text encoder: bidirectional transformer over fixed-length token sequences,
pooling the end-of-text position as the sentence vector.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .tokenizer import EOT_ID, TokenizedText
from .vision import TransformerBlock, init_truncated_normal


@dataclass
class TextConfig:
    vocab_size: int = 256
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    max_len: int = 32
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")


@dataclass
class TextEmbedding:
    sequence: torch.Tensor  # (B, M, D)
    eot_vector: torch.Tensor  # (B, D), equals sequence at the end-token position
    eot_index: torch.Tensor  # (B,) long


def batch_token_ids(tokens_list: list[TokenizedText]) -> torch.Tensor:
    return torch.tensor([t.token_ids for t in tokens_list], dtype=torch.long)


class TextEncoder(nn.Module):
    def __init__(self, cfg: TextConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.token_embed = nn.Embedding(cfg.vocab_size, d)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.max_len, d))
        self.blocks = nn.ModuleList(
            TransformerBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers)
        )
        self.norm = nn.LayerNorm(d)
        init_truncated_normal(self)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, token_ids: torch.Tensor) -> TextEmbedding:
        """Encode (B, M) token ids; pad positions past the end token are inert."""
        if token_ids.ndim != 2 or token_ids.shape[1] != self.cfg.max_len:
            raise ValueError(f"expected (B, {self.cfg.max_len}) token ids")
        eot_mask = token_ids == EOT_ID
        if not (eot_mask.sum(dim=1) == 1).all():
            raise ValueError("every sequence needs exactly one end token")
        eot_index = eot_mask.float().argmax(dim=1)
        positions = torch.arange(self.cfg.max_len, device=token_ids.device)
        pad_mask = positions[None, :] > eot_index[:, None]  # (B, M), True = ignore

        x = self.token_embed(token_ids) + self.pos_embed
        for blk in self.blocks:
            x = blk(x, key_padding_mask=pad_mask)
        x = self.norm(x)
        x = x * (~pad_mask)[..., None]  # zero pad rows so pad ids cannot leak out
        eot_vector = x[torch.arange(x.shape[0]), eot_index]
        return TextEmbedding(sequence=x, eot_vector=eot_vector, eot_index=eot_index)
