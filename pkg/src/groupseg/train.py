"""Training loop: epoch batching with cross-image pairing, Adam with cosine
decay, EMA momentum updates, checkpointing, and per-step metric logging.
"""
from __future__ import annotations

import json
import math
import os
import pickle
import random
import zipfile
from dataclasses import asdict, dataclass

import numpy as np
import torch
from PIL import Image

from .corpus import CorpusError, CrossPairIndex, Triplet, build_cross_pair_index, build_entity_prompt, mask_entities, sample_cross_pair
from .losses import (
    LossBundle,
    PROMPT_TEMPLATES,
    contrastive_loss,
    lambda_at_epoch,
    mask_consistency_loss,
    total_loss,
)
from .model import GroupSegModel, LossConfig, ema_update, make_momentum_model
from .text import batch_token_ids
from .tokenizer import Tokenizer
from .vision import VisualConfig
from .text import TextConfig

CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    """Raised when the optimization produces non-finite values."""


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 3.2e-4
    weight_decay: float = 0.5
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 = final only
    grad_accum: int = 1
    grad_clip: float = 1.0
    entity_loss: bool = True  # ablation switch for the completion objective
    device: str = "cpu"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")


def load_image(path, image_size: int) -> torch.Tensor:
    img = Image.open(path).convert("RGB")
    if img.size != (image_size, image_size):
        img = img.resize((image_size, image_size), Image.NEAREST)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy((arr - 0.5) / 0.5).permute(2, 0, 1)


def make_batches(
    triplets: list[Triplet],
    index: CrossPairIndex,
    rng: random.Random,
    batch_size: int,
    with_partners: bool = True,
):
    """Shuffle the corpus and chunk it; every triplet appears exactly once
    per epoch as an anchor. Partnerless anchors are allowed."""
    order = list(range(len(triplets)))
    rng.shuffle(order)
    for start in range(0, len(order), batch_size):
        batch = []
        for i in order[start : start + batch_size]:
            anchor = triplets[i]
            partner, entity = None, None
            if with_partners:
                try:
                    partner, entity = sample_cross_pair(anchor, index, rng)
                except CorpusError:
                    pass
            batch.append((anchor, partner, entity))
        yield batch


def save_checkpoint(path, model, momentum, optimizer, scheduler, tokenizer, train_cfg, step, epoch):
    payload = {
        "version": CHECKPOINT_VERSION,
        "visual_cfg": json.dumps(asdict(model.visual_cfg)),
        "text_cfg": json.dumps(asdict(model.text_cfg)),
        "loss_cfg": json.dumps(asdict(model.loss_cfg)),
        "train_cfg": json.dumps(asdict(train_cfg)),
        "vocab": list(tokenizer.vocab),
        "model": model.state_dict(),
        "momentum": momentum.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "step": step,
        "epoch": epoch,
    }
    torch.save(payload, path)


def load_checkpoint(path):
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (RuntimeError, EOFError, pickle.UnpicklingError, zipfile.BadZipFile) as exc:
        raise ValueError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ValueError(f"unreadable checkpoint {path}: not a training snapshot")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {payload.get('version')!r}")
    visual_cfg = VisualConfig(**json.loads(payload["visual_cfg"]))
    text_cfg = TextConfig(**json.loads(payload["text_cfg"]))
    loss_cfg = LossConfig(**json.loads(payload["loss_cfg"]))
    train_cfg = TrainConfig(**json.loads(payload["train_cfg"]))
    tokenizer = Tokenizer(payload["vocab"])
    model = GroupSegModel(visual_cfg, text_cfg, loss_cfg)
    model.load_state_dict(payload["model"])
    momentum = make_momentum_model(model)
    momentum.load_state_dict(payload["momentum"])
    return model, momentum, tokenizer, train_cfg, payload


class Trainer:
    def __init__(
        self,
        model: GroupSegModel,
        tokenizer: Tokenizer,
        triplets: list[Triplet],
        train_cfg: TrainConfig,
        out_dir,
        templates: list[str] | None = None,
    ):
        if not triplets:
            raise CorpusError("empty corpus")
        self.model = model
        self.loss_cfg = model.loss_cfg
        self.cfg = train_cfg
        self.tokenizer = tokenizer
        self.triplets = triplets
        self.index = build_cross_pair_index(triplets)
        self.out_dir = str(out_dir)
        self.templates = templates or PROMPT_TEMPLATES
        self.max_len = model.text_cfg.max_len
        self.momentum = make_momentum_model(model)
        self.optimizer = torch.optim.Adam(
            model.parameters(), lr=train_cfg.lr, weight_decay=train_cfg.weight_decay
        )
        steps_per_epoch = max(1, math.ceil(len(triplets) / train_cfg.batch_size))
        total_steps = max(1, train_cfg.epochs * steps_per_epoch)
        self.scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            self.optimizer, T_max=total_steps
        )
        self.step = 0
        self.start_epoch = 0
        self._image_cache: dict[str, torch.Tensor] = {}

    def _image(self, triplet: Triplet) -> torch.Tensor:
        tid = triplet.pair.id
        if tid not in self._image_cache:
            self._image_cache[tid] = load_image(
                triplet.pair.image_path, self.model.visual_cfg.image_size
            )
        return self._image_cache[tid]

    def train_step(self, batch, epoch: int, rng: random.Random) -> LossBundle:
        model = self.model
        lam = lambda_at_epoch(self.loss_cfg, epoch)
        anchors = [a for a, _, _ in batch]
        images = torch.stack([self._image(a) for a in anchors])
        state = model.encode_image(images)
        tau = model.temperature

        cap_ids = batch_token_ids([a.tokens for a in anchors])
        cap_emb = model.encode_text(cap_ids)
        z_img = model.project_visual(state.groups)
        z_txt = model.project_text(cap_emb.eot_vector)
        l_contrast = contrastive_loss(z_img, z_txt, tau)

        if self.cfg.entity_loss:
            masked = [
                mask_entities(a.tokens, a.entities, self.tokenizer) for a in anchors
            ]
            masked_emb = model.encode_text(batch_token_ids(masked))
            completed = model.complete_masked_entities(masked_emb.sequence, state.groups)
            z_completed = model.project_text(
                completed[torch.arange(len(anchors)), masked_emb.eot_index]
            )
            prompts = [
                build_entity_prompt(list(a.entities), self.templates, rng, self.tokenizer, self.max_len)
                for a in anchors
            ]
            prompt_emb = model.encode_text(batch_token_ids(prompts))
            z_entity = model.project_text(prompt_emb.eot_vector)
            l_entity = contrastive_loss(z_completed, z_entity, tau)
        else:
            l_entity = images.new_zeros(())

        l_mask = images.new_zeros(())
        diagnostics: dict = {}
        if lam > 0:
            contributions = []
            for anchor, partner, entity in batch:
                if partner is None:
                    continue
                loss, diag = mask_consistency_loss(
                    self._image(anchor),
                    self._image(partner),
                    entity,
                    model,
                    self.momentum,
                    self.loss_cfg,
                    self.tokenizer,
                    self.max_len,
                )
                contributions.append(loss)
                diagnostics = diag
            if contributions:
                l_mask = torch.stack(contributions).sum() / len(batch)

        bundle = total_loss(l_contrast, l_entity, l_mask, lam, diagnostics)
        if not torch.isfinite(bundle.total):
            ids = [a.pair.id for a in anchors]
            raise NumericError(f"non-finite loss at step {self.step}, batch ids {ids}")

        self.optimizer.zero_grad()
        bundle.total.backward()
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        self.scheduler.step()
        ema_update(self.momentum, model, self.loss_cfg.ema_coef)
        self.step += 1
        return bundle

    def fit(self, resume_payload: dict | None = None) -> str:
        os.makedirs(self.out_dir, exist_ok=True)
        metrics_path = os.path.join(self.out_dir, "metrics.jsonl")
        ckpt_path = os.path.join(self.out_dir, "checkpoint.pt")
        if resume_payload is not None:
            self.optimizer.load_state_dict(resume_payload["optimizer"])
            self.scheduler.load_state_dict(resume_payload["scheduler"])
            self.step = resume_payload["step"]
            self.start_epoch = resume_payload["epoch"]
        mode = "a" if resume_payload is not None else "w"
        with open(metrics_path, mode, encoding="utf-8") as metrics:
            for epoch in range(self.start_epoch, self.cfg.epochs):
                # per-epoch derived rng keeps resume-at-epoch-boundary exact
                rng = random.Random(self.cfg.seed * 1_000_003 + epoch)
                lam = lambda_at_epoch(self.loss_cfg, epoch)
                batches = make_batches(
                    self.triplets, self.index, rng, self.cfg.batch_size, with_partners=lam > 0
                )
                for batch in batches:
                    bundle = self.train_step(batch, epoch, rng)
                    metrics.write(json.dumps(bundle.to_record(self.step)) + "\n")
                if self.cfg.checkpoint_every and (epoch + 1) % self.cfg.checkpoint_every == 0:
                    self._save(ckpt_path, epoch + 1)
            self._save(ckpt_path, self.cfg.epochs)
        return ckpt_path

    def _save(self, path, epoch: int) -> None:
        save_checkpoint(
            path,
            self.model,
            self.momentum,
            self.optimizer,
            self.scheduler,
            self.tokenizer,
            self.cfg,
            self.step,
            epoch,
        )
