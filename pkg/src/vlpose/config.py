"""Flat `key = value` run configuration with schema validation.

Files contain one assignment per line, ``#`` starts a comment, nesting is
not supported.  Unknown keys are rejected; command-line flags override file
values; the VLPOSE_SEED environment variable overrides the seed last.
"""

from __future__ import annotations

import os

from .encoder import EncoderConfig
from .model import ModelConfig
from .train import TrainConfig

__all__ = ["ConfigError", "RunConfig", "SCHEMA"]


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    "height": (int, 256),
    "width": (int, 192),
    "patch": (int, 16),
    "channels": (int, 64),
    "depth": (int, 4),
    "heads": (int, 4),
    "mlp_ratio": (int, 4),
    "prompt_tokens": (int, 0),
    "prompt_mode": (str, "shallow"),
    "drop_path": (float, 0.1),
    "n_keypoints": (int, 17),
    "decoder": (str, "Baseline"),
    "matcher": (str, "none"),
    "matcher_heads": (int, 4),
    "matcher_literal": (_bool, False),
    "prompt_policy": (str, "style"),
    "text_tokens": (int, 8),
    "text_dim": (int, 64),
    "embed_seed": (int, 0),
    "embed_table": (str, ""),
    "steps": (int, 300),
    "batch": (int, 16),
    "lr": (float, 5e-4),
    "weight_decay": (float, 0.1),
    "layer_decay": (float, 0.75),
    "finetune": (str, "full"),
    "sigma": (float, 2.0),
}


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = {key: default for key, (_, default) in SCHEMA.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            self.values[key] = parser(value) if isinstance(value, str) else parser(str(value))
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from None

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        rc = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
                key, _, value = line.partition("=")
                try:
                    rc.set(key.strip(), value.strip())
                except ConfigError as exc:
                    raise ConfigError(f"{path}:{lineno}: {exc}") from None
        return rc

    def apply_overrides(self, overrides: dict) -> None:
        for key, value in overrides.items():
            if value is not None:
                self.set(key, value)

    def apply_env(self, env=os.environ) -> None:
        if "VLPOSE_SEED" in env:
            self.set("seed", env["VLPOSE_SEED"])

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for key in SCHEMA:
                fh.write(f"{key} = {self.values[key]}\n")

    # -- typed views ---------------------------------------------------------

    def model_config(self, **overrides) -> ModelConfig:
        merged = dict(self.values)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        enc = EncoderConfig(
            height=merged["height"], width=merged["width"], patch=merged["patch"],
            channels=merged["channels"], depth=merged["depth"], heads=merged["heads"],
            mlp_ratio=merged["mlp_ratio"], n_prompt_tokens=merged["prompt_tokens"],
            prompt_mode=merged["prompt_mode"], drop_path_rate=merged["drop_path"],
        )
        return ModelConfig(
            encoder=enc, n_keypoints=merged["n_keypoints"], decoder=merged["decoder"],
            matcher_variant=merged["matcher"], matcher_heads=merged["matcher_heads"],
            matcher_literal=merged["matcher_literal"], text_tokens=merged["text_tokens"],
            text_dim=merged["text_dim"], prompt_policy=merged["prompt_policy"],
            embed_seed=merged["embed_seed"], init_seed=merged["seed"],
        )

    def train_config(self, **overrides) -> TrainConfig:
        merged = dict(self.values)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig(
            base_lr=merged["lr"], weight_decay=merged["weight_decay"],
            total_steps=merged["steps"], layer_decay=merged["layer_decay"],
            batch_size=merged["batch"], seed=merged["seed"], finetune_mode=merged["finetune"],
        )
