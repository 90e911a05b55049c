"""Zero-shot segmentation and evaluation: prompted class embeddings,
per-pixel labeling with background thresholding, mIoU reporting, and
class-agnostic mask probing of the patch-to-group affinity.

Evaluation datasets are an images directory plus per-image PNG label maps.
Label-map encoding: 0 = background, v = class index v - 1, 255 = ignore.
An index-to-name JSON maps class indices to names.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .model import GroupSegModel
from .text import batch_token_ids
from .tokenizer import Tokenizer

BACKGROUND = -1
IGNORE_INDEX = 255

CLASS_TEMPLATES = [
    "A photo of a {}.",
    "A photo of the {}.",
    "An image of a {}.",
]


@dataclass
class ClassEmbeddings:
    names: list[str]
    vectors: torch.Tensor  # (C, joint_dim), unit rows
    templates: list[str]

    def __post_init__(self):
        if len(self.names) < 1:
            raise ValueError("at least one class required")


@dataclass
class SegmentationResult:
    labels: np.ndarray  # (H, W) int, -1 = background
    soft_scores: np.ndarray | None = None  # (H, W, C)


@dataclass
class EvalReport:
    per_class_iou: dict[str, float]
    miou: float
    pixel_counts: dict[str, int] = field(default_factory=dict)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(
                {"miou": self.miou, "per_class_iou": self.per_class_iou, "pixel_counts": self.pixel_counts},
                f,
                indent=2,
            )


@torch.no_grad()
def embed_classes(
    names: list[str],
    templates: list[str],
    model: GroupSegModel,
    tokenizer: Tokenizer,
) -> ClassEmbeddings:
    """Average the projected prompt embeddings over templates, re-normalize."""
    if not names:
        raise ValueError("names must be non-empty")
    if not templates:
        raise ValueError("empty template list")
    rows = []
    for name in names:
        tokens = [tokenizer.encode(t.format(name), model.text_cfg.max_len) for t in templates]
        emb = model.encode_text(batch_token_ids(tokens))
        z = model.project_text(emb.eot_vector).mean(dim=0)
        rows.append(F.normalize(z, dim=-1))
    return ClassEmbeddings(list(names), torch.stack(rows), list(templates))


@torch.no_grad()
def segment(
    image: torch.Tensor,
    model: GroupSegModel,
    classes: ClassEmbeddings,
    bkg_threshold: float,
    return_scores: bool = False,
) -> SegmentationResult:
    """Per-pixel class labels for one (3, H, W) image.

    Group-to-class scores are a softmax over classes of cosine similarity
    divided by the learned temperature; patch scores mix them through the
    affinity, and patches whose best score falls below the threshold become
    background. The patch grid is upsampled to pixels by nearest neighbor.
    """
    model.eval()
    state = model.encode_image(image[None])
    affinity = state.affinity[0]  # (L, K)
    groups = model.project_groups(state.groups[0])  # (K, joint)
    logits = groups @ classes.vectors.T / model.temperature  # (K, C)
    group_scores = F.softmax(logits, dim=-1)
    patch_scores = affinity @ group_scores  # (L, C)

    best, labels = patch_scores.max(dim=-1)
    labels = torch.where(best < bkg_threshold, torch.full_like(labels, BACKGROUND), labels)

    size = model.visual_cfg.image_size
    grid = size // model.visual_cfg.patch_size
    label_grid = labels.reshape(grid, grid)
    scale = size // grid
    pixel_labels = label_grid.repeat_interleave(scale, 0).repeat_interleave(scale, 1)
    scores = None
    if return_scores:
        score_grid = patch_scores.reshape(grid, grid, -1)
        scores = score_grid.repeat_interleave(scale, 0).repeat_interleave(scale, 1).numpy()
    return SegmentationResult(pixel_labels.numpy().astype(np.int64), scores)


def compute_miou(preds, gts, class_names: list[str]) -> EvalReport:
    """Dataset-level per-class IoU; background counts as its own class,
    ignore-index pixels are excluded, classes absent everywhere are dropped
    from the mean."""
    c = len(class_names)
    inter = np.zeros(c + 1, dtype=np.int64)
    union = np.zeros(c + 1, dtype=np.int64)
    seen = np.zeros(c + 1, dtype=bool)
    pixels = 0
    for pred, gt in zip(preds, gts):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError("prediction/ground-truth shape mismatch")
        valid = gt != IGNORE_INDEX
        # map background (-1) onto slot C
        p = np.where(pred == BACKGROUND, c, pred)[valid]
        g = np.where(gt == BACKGROUND, c, gt)[valid]
        pixels += int(valid.sum())
        for k in range(c + 1):
            pk, gk = p == k, g == k
            inter[k] += int((pk & gk).sum())
            union[k] += int((pk | gk).sum())
            seen[k] |= bool(pk.any() or gk.any())
    names = class_names + ["background"]
    per_class = {}
    evaluated = []
    for k in range(c + 1):
        if not seen[k]:
            continue
        iou = inter[k] / union[k] if union[k] > 0 else 0.0
        per_class[names[k]] = float(iou)
        evaluated.append(iou)
    miou = float(np.mean(evaluated)) if evaluated else 0.0
    return EvalReport(per_class, miou, {"evaluated_pixels": pixels})


def mask_probe(affinity: torch.Tensor, gt_mask: np.ndarray, keep_fraction: float) -> float:
    """Best Jaccard over groups after binarizing each affinity column by
    keeping its top `keep_fraction` entries as foreground."""
    gt = np.asarray(gt_mask).reshape(-1).astype(bool)
    if not gt.any():
        return 0.0
    a = affinity.detach().numpy()
    l, k = a.shape
    n_keep = max(1, int(round(keep_fraction * l)))
    best = 0.0
    for col in range(k):
        order = np.argsort(-a[:, col], kind="stable")
        fg = np.zeros(l, dtype=bool)
        fg[order[:n_keep]] = True
        inter = (fg & gt).sum()
        union = (fg | gt).sum()
        jac = inter / union if union > 0 else 0.0
        best = max(best, float(jac))
    return best


def load_label_map(path) -> np.ndarray:
    """PNG label map -> int array with -1 background, 255 ignore."""
    arr = np.asarray(Image.open(path), dtype=np.int64)
    out = np.where(arr == IGNORE_INDEX, IGNORE_INDEX, arr - 1)
    out = np.where(arr == 0, BACKGROUND, out)
    return out


def save_label_map(labels: np.ndarray, path) -> None:
    arr = np.where(labels == IGNORE_INDEX, IGNORE_INDEX, labels + 1)
    arr = np.where(labels == BACKGROUND, 0, arr)
    Image.fromarray(arr.astype(np.uint8)).save(path)


def load_class_names(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        mapping = json.load(f)
    return [mapping[str(i)] for i in range(len(mapping))]
