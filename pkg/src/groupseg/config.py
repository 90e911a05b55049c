"""Run configuration: {visual, text, loss, train} sections, loadable from
JSON or TOML, with dotted-key overrides from the command line."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .model import LossConfig
from .text import TextConfig
from .train import TrainConfig
from .vision import VisualConfig


@dataclass
class RunConfig:
    visual: VisualConfig = field(default_factory=VisualConfig)
    text: TextConfig = field(default_factory=TextConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in ("visual", "text", "loss", "train")}


def desk_preset() -> RunConfig:
    """Laptop-scale defaults: small towers, 64px images, batch 32."""
    return RunConfig(
        visual=VisualConfig(
            image_size=64, patch_size=8, embed_dim=64, num_groups=8, layers_stage1=2, layers_stage2=2, heads=4
        ),
        text=TextConfig(vocab_size=256, embed_dim=64, layers=2, heads=4, max_len=32),
        loss=LossConfig(joint_dim=256, lam=0.1, lambda_start_epoch=30, selection_ratio=0.5, mask_threshold=0.65, ema_coef=0.99),
        train=TrainConfig(epochs=40, batch_size=32, lr=1e-3, weight_decay=0.0, grad_clip=0.0, seed=0),
    )


PRESETS = {"desk": desk_preset, "default": RunConfig}


def load_config(path=None, preset: str = "desk", overrides: list[str] | None = None) -> RunConfig:
    cfg = PRESETS[preset]()
    data: dict = {}
    if path is not None:
        text = open(path, "rb").read()
        if str(path).endswith(".toml"):
            data = tomllib.loads(text.decode("utf-8"))
        else:
            data = json.loads(text.decode("utf-8"))
    raw = cfg.to_dict()
    for section, values in data.items():
        if section not in raw:
            raise ValueError(f"unknown config section {section!r}")
        raw[section].update(values)
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override must be dotted.key=value: {item!r}")
        key, value = item.split("=", 1)
        parts = key.split(".")
        if len(parts) != 2 or parts[0] not in raw or parts[1] not in raw[parts[0]]:
            raise ValueError(f"unknown config key {key!r}")
        current = raw[parts[0]][parts[1]]
        raw[parts[0]][parts[1]] = _coerce(value, type(current))
    return RunConfig(
        visual=VisualConfig(**raw["visual"]),
        text=TextConfig(**raw["text"]),
        loss=LossConfig(**raw["loss"]),
        train=TrainConfig(**raw["train"]),
    )


def _coerce(value: str, target_type):
    if target_type is bool:
        return value.lower() in ("1", "true", "yes", "on")
    if target_type in (int, float, str):
        return target_type(value)
    return value
