"""Synthetic shape corpus: renders images of 1-3 non-overlapping colored
shapes with templated captions and pixel-perfect ground-truth label maps.
Everything is deterministic given the seed.
"""
from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from .corpus import RawPair, write_corpus

DEFAULT_SHAPES = ["circle", "square", "triangle", "cross"]
DEFAULT_COLORS = {
    "red": (220, 50, 50),
    "green": (50, 200, 70),
    "blue": (60, 90, 220),
}
BACKGROUND_LEVEL = 26


def _draw_shape(shape: str, cx: int, cy: int, half: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= half**2
    if shape == "square":
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    if shape == "triangle":
        rel = yy - (cy - half)
        width = rel * half / (2 * half)  # half-width grows toward the base
        return (rel >= 0) & (yy <= cy + half) & (np.abs(xx - cx) <= width)
    if shape == "cross":
        bar = max(2, half // 2)
        horiz = (np.abs(yy - cy) <= bar) & (np.abs(xx - cx) <= half)
        vert = (np.abs(xx - cx) <= bar) & (np.abs(yy - cy) <= half)
        return horiz | vert
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(rng: np.random.Generator, shapes, colors, size: int):
    """One image: float RGB array, per-pixel class labels, and the caption."""
    min_half, max_half = max(4, size // 10), max(6, size // 4)
    if size < 4 * min_half:
        raise ValueError("canvas too small for requested shapes")
    n = int(rng.integers(1, 4))
    color_names = list(colors)
    img = np.full((size, size, 3), BACKGROUND_LEVEL, dtype=np.float64)
    labels = np.zeros((size, size), dtype=np.uint8)  # 0 = background
    phrases = []
    boxes = []
    for _ in range(n):
        for _attempt in range(50):
            half = int(rng.integers(min_half, max_half + 1))
            cx = int(rng.integers(half + 1, size - half - 1))
            cy = int(rng.integers(half + 1, size - half - 1))
            box = (cx - half - 2, cy - half - 2, cx + half + 2, cy + half + 2)
            if all(
                box[2] < b[0] or b[2] < box[0] or box[3] < b[1] or b[3] < box[1]
                for b in boxes
            ):
                break
        else:
            continue
        boxes.append(box)
        shape = shapes[int(rng.integers(len(shapes)))]
        color = color_names[int(rng.integers(len(color_names)))]
        mask = _draw_shape(shape, cx, cy, half, size)
        jitter = float(rng.uniform(0.85, 1.1))
        img[mask] = np.clip(np.array(colors[color], dtype=np.float64) * jitter, 0, 255)
        labels[mask] = shapes.index(shape) + 1
        size_word = "small" if half <= (min_half + max_half) // 2 else "big"
        phrases.append(f"a {size_word} {color} {shape}")
    if not phrases:
        raise RuntimeError("failed to place any shape")
    caption = " and ".join(phrases)
    return img.astype(np.uint8), labels, caption


def make_synthetic(
    n_images: int,
    out_dir,
    shapes: list[str] | None = None,
    colors: dict | None = None,
    size: int = 64,
    seed: int = 0,
    with_masks: bool = True,
    prefix: str = "img",
) -> tuple[str, str]:
    """Write images, gt label maps, a class index file, and the JSONL corpus.

    Returns (corpus_path, classes_path).
    """
    shapes = list(DEFAULT_SHAPES) if shapes is None else shapes
    colors = dict(DEFAULT_COLORS) if colors is None else colors
    if not shapes or not colors:
        raise ValueError("shapes and colors must be non-empty")
    rng = np.random.default_rng(seed)
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    if with_masks:
        os.makedirs(mask_dir, exist_ok=True)
    pairs = []
    for i in range(n_images):
        img, labels, caption = render_scene(rng, shapes, colors, size)
        name = f"{prefix}_{i:05d}"
        img_path = os.path.join(img_dir, name + ".png")
        Image.fromarray(img).save(img_path)
        mask_path = None
        if with_masks:
            mask_path = os.path.join(mask_dir, name + ".png")
            Image.fromarray(labels).save(mask_path)
        pairs.append(RawPair(id=name, image_path=img_path, caption=caption, mask_path=mask_path))
    corpus_path = os.path.join(out_dir, "corpus.jsonl")
    write_corpus(pairs, corpus_path)
    classes_path = os.path.join(out_dir, "classes.json")
    with open(classes_path, "w", encoding="utf-8") as f:
        json.dump({str(i): s for i, s in enumerate(shapes)}, f, indent=2)
    return corpus_path, classes_path
