"""Flat ``key = value`` run configuration shared by the CLI and the trainer."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .losses import LossWeights
from .model import VARIANTS, ModelConfig
from .swin import BlockConfig


@dataclass
class RunConfig:
    # architecture
    patch_size: int = 3
    window_size: int = 7
    num_heads: int = 3
    embed_dim: int = 54
    shift_size: int | None = None
    mlp_ratio: int = 4
    num_branches: int = 3
    num_mswt: int = 3
    skip_small: bool = True
    skip_large: bool = True
    large_skip_source: str = "stem"
    # training
    total_iters: int = 1000
    lr0: float = 5e-4
    batch: int = 5
    crop: int = 231
    alpha: float = 0.2
    beta: float = 4.0
    lam: float = 1.0
    eval_every: int = 0
    checkpoint_every: int = 0
    seed: int = 0
    clip_grad_norm: float | None = None

    HELP = {
        "patch_size": "patch side in pixels",
        "window_size": "attention window side in patches",
        "num_heads": "attention heads per block",
        "embed_dim": "token width after linear embedding",
        "shift_size": "shifted-window offset in patches (none = window_size // 2)",
        "mlp_ratio": "MLP hidden width / embed_dim",
        "num_branches": "parallel blocks per multi-branch module",
        "num_mswt": "number of fusion modules before the fusion-free one",
        "skip_small": "add the second fusion module's output before the tail block",
        "skip_large": "add the shallow features to the network output",
        "large_skip_source": "'stem' (stem block output) or 'input' (raw image)",
        "total_iters": "training iterations",
        "lr0": "initial learning rate",
        "batch": "pairs per batch",
        "crop": "training crop side in pixels",
        "alpha": "L1 loss weight",
        "beta": "(1 - SSIM) loss weight",
        "lam": "identity loss weight",
        "eval_every": "iterations between test evaluations (0 = end only)",
        "checkpoint_every": "iterations between checkpoints (0 = end only)",
        "seed": "master seed for init and batching",
        "clip_grad_norm": "global gradient-norm clip (none = off)",
    }

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def update(self, pairs: dict[str, str]) -> RunConfig:
        types = {f.name: f.type for f in fields(self)}
        for key, raw in pairs.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            setattr(self, key, _parse(raw.strip(), types[key], key))
        return self

    @classmethod
    def from_file(cls, path, overrides: dict[str, str] | None = None) -> RunConfig:
        cfg = cls()
        if path is not None:
            cfg.update(parse_text(Path(path).read_text(encoding="utf-8"), str(path)))
        if overrides:
            cfg.update(overrides)
        return cfg

    def set_variant(self, variant: str) -> None:
        try:
            self.skip_small, self.skip_large = VARIANTS[variant.lower()]
        except KeyError:
            raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}") from None

    def model_config(self) -> ModelConfig:
        block = BlockConfig(patch_size=self.patch_size, window_size=self.window_size,
                            num_heads=self.num_heads, embed_dim=self.embed_dim,
                            shift_size=self.shift_size, mlp_ratio=self.mlp_ratio)
        return ModelConfig(block=block, num_branches=self.num_branches, num_mswt=self.num_mswt,
                           skip_small=self.skip_small, skip_large=self.skip_large,
                           large_skip_source=self.large_skip_source)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.lam)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'none' if v is None else str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def replace(self, **kw) -> RunConfig:
        return dataclasses.replace(self, **kw)


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _parse(raw: str, typ: str, key: str):
    low = raw.lower()
    try:
        if "None" in typ and low in ("none", ""):
            return None
        if typ.startswith("bool"):
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ.startswith("int"):
            return int(raw)
        if typ.startswith("float"):
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"bad value for {key}: {raw!r} (expected {typ})") from None
