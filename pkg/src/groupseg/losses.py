"""Training objectives: symmetric InfoNCE alignment, masked entity
completion, and cross-image mask consistency with Hungarian-matched Dice
distances against momentum-model pseudo targets.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .corpus import CorpusError, CrossPairIndex, Triplet, build_entity_prompt, sample_cross_pair
from .model import GroupSegModel, LossConfig
from .text import batch_token_ids
from .tokenizer import Tokenizer

SINGLE_ENTITY_TEMPLATE = "A photo of a {}."

PROMPT_TEMPLATES = [
    "A photo of a {}.",
    "A painting of a {}.",
    "A picture of a {}.",
    "An image of a {}.",
    "A photo of the {}.",
]


@dataclass
class LossBundle:
    contrast: torch.Tensor
    entity: torch.Tensor
    mask: torch.Tensor
    total: torch.Tensor
    lam: float
    matched_permutations: list = field(default_factory=list)
    selected_subgroups: list = field(default_factory=list)

    def to_record(self, step: int) -> dict:
        return {
            "step": step,
            "L_contrast": float(self.contrast.detach()),
            "L_entity": float(self.entity.detach()),
            "L_mask": float(self.mask.detach()),
            "L_total": float(self.total.detach()),
            "lambda": self.lam,
        }


def contrastive_loss(z_a: torch.Tensor, z_b: torch.Tensor, tau) -> torch.Tensor:
    """Symmetric InfoNCE over (B, joint) unit rows; diagonal pairs are positive."""
    tau_val = float(tau.detach()) if torch.is_tensor(tau) else float(tau)
    if tau_val <= 0:
        raise ValueError("temperature must be > 0")
    logits = z_a @ z_b.T / tau
    targets = torch.arange(z_a.shape[0], device=z_a.device)
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))


def select_subgroups(
    groups: torch.Tensor,
    entity_emb: torch.Tensor,
    ratio: float,
    model: GroupSegModel,
) -> tuple[list[int], torch.Tensor]:
    """Top-round(rK) groups by cosine similarity to the entity embedding,
    descending, ties resolved toward the lower index."""
    k = groups.shape[0]
    k_sub = min(k, max(1, round(ratio * k)))
    projected = model.project_groups(groups)  # (K, joint), unit rows
    sims = projected @ entity_emb
    order = torch.argsort(sims, descending=True, stable=True)
    indices = order[:k_sub].tolist()
    return indices, groups[indices]


def ground_masks(image_tokens: torch.Tensor, subgroups: torch.Tensor) -> torch.Tensor:
    """Soft masks sigmoid(I @ G_sub^T), shape (L, K')."""
    return torch.sigmoid(image_tokens @ subgroups.T)


def _cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Column-wise cosine similarities; zero-norm columns contribute 0."""
    na = a.norm(dim=0, keepdim=True)
    nb = b.norm(dim=0, keepdim=True)
    sims = a.T @ b
    denom = na.T @ nb
    return torch.where(denom > 0, sims / denom.clamp(min=1e-30), torch.zeros_like(sims))


def hungarian_match(masks: torch.Tensor, cross_masks: torch.Tensor) -> list[int]:
    """Permutation p minimizing sum_k -cos(m_k, m_hat_{p(k)}).

    Optimal assignment via scipy; among cost-equal optima the
    lexicographically smallest permutation is returned.
    """
    k = masks.shape[1]
    if cross_masks.shape[1] != k:
        raise ValueError("mask sets must have equal column counts")
    cost = (-_cosine_matrix(masks, cross_masks)).detach().double().numpy()

    def best_cost(c):
        if c.size == 0:
            return 0.0
        rows, cols = linear_sum_assignment(c)
        return float(c[rows, cols].sum())

    total = best_cost(cost)
    perm: list[int] = []
    free = list(range(k))
    remaining = total
    tol = 1e-9 * max(1.0, abs(total))
    for row in range(k):
        best_j, best_candidate = 0, None
        for j, col in enumerate(free):
            rest = [c for c in free if c != col]
            sub = cost[row + 1 :][:, rest]
            candidate = cost[row, col] + best_cost(sub)
            if candidate <= remaining + tol:
                best_j = j
                break
            if best_candidate is None or candidate < best_candidate:
                best_j, best_candidate = j, candidate
        col = free.pop(best_j)
        perm.append(col)
        remaining = remaining - cost[row, col]
    return perm


def dice_distance(target: torch.Tensor, pred: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """1 - (2 * overlap + smooth) / (|target| + |pred| + smooth), in [0, 1]."""
    if target.shape != pred.shape:
        raise ValueError("mask lengths must match")
    overlap = (target * pred).sum()
    return 1.0 - (2.0 * overlap + smooth) / (target.sum() + pred.sum() + smooth)


def binarize(mask: torch.Tensor, threshold: float) -> torch.Tensor:
    """Strictly-greater comparison for determinism at the boundary."""
    return (mask > threshold).to(mask.dtype)


def encode_entity_embedding(model: GroupSegModel, entity: str, tokenizer: Tokenizer, max_len: int) -> torch.Tensor:
    """Projected end-token vector of a single-entity prompt."""
    tokens = tokenizer.encode(SINGLE_ENTITY_TEMPLATE.format(entity), max_len)
    emb = model.encode_text(batch_token_ids([tokens]))
    return model.project_text(emb.eot_vector)[0]


def mask_consistency_loss(
    anchor_image: torch.Tensor,
    partner_image: torch.Tensor,
    shared_entity: str,
    online: GroupSegModel,
    momentum: GroupSegModel,
    cfg: LossConfig,
    tokenizer: Tokenizer,
    max_len: int,
) -> tuple[torch.Tensor, dict]:
    """Symmetric cross-image consistency between Hungarian-aligned masks.

    Pseudo targets come from the momentum model, binarized and
    gradient-stopped; predictions cross the two images' online subgroups.
    """
    images = torch.stack([anchor_image, partner_image])
    with torch.no_grad():
        state_m = momentum.encode_image(images)
        ent_m = encode_entity_embedding(momentum, shared_entity, tokenizer, max_len)
        targets = []
        for i in range(2):
            _, g_sub = select_subgroups(state_m.groups[i], ent_m, cfg.selection_ratio, momentum)
            targets.append(binarize(ground_masks(state_m.image_tokens[i], g_sub), cfg.mask_threshold))

    state = online.encode_image(images)
    ent = encode_entity_embedding(online, shared_entity, tokenizer, max_len)
    idx1, g1_sub = select_subgroups(state.groups[0], ent, cfg.selection_ratio, online)
    idx2, g2_sub = select_subgroups(state.groups[1], ent, cfg.selection_ratio, online)
    cross1 = ground_masks(state.image_tokens[0], g2_sub)  # partner groups on anchor pixels
    cross2 = ground_masks(state.image_tokens[1], g1_sub)

    loss = anchor_image.new_zeros(())
    perms = []
    for target, cross in ((targets[0], cross1), (targets[1], cross2)):
        perm = hungarian_match(target, cross)
        perms.append(perm)
        k_sub = target.shape[1]
        per_k = [dice_distance(target[:, k], cross[:, perm[k]]) for k in range(k_sub)]
        loss = loss + torch.stack(per_k).mean()
    return 0.5 * loss, {"permutations": perms, "subgroups": [idx1, idx2]}


def lambda_at_epoch(cfg: LossConfig, epoch: int) -> float:
    return cfg.lam if epoch >= cfg.lambda_start_epoch else 0.0


def total_loss(
    contrast: torch.Tensor,
    entity: torch.Tensor,
    mask: torch.Tensor,
    lam: float,
    diagnostics: dict | None = None,
) -> LossBundle:
    diagnostics = diagnostics or {}
    return LossBundle(
        contrast=contrast,
        entity=entity,
        mask=mask,
        total=contrast + entity + lam * mask,
        lam=lam,
        matched_permutations=diagnostics.get("permutations", []),
        selected_subgroups=diagnostics.get("subgroups", []),
    )
