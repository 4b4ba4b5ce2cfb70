"""SDNet backbone: stem block, multi-branch fusion stages, skip connections.

Wiring (all tensors image-shaped ``[..., H, W, 3]``)::

    f0 = stem(x)
    f1 = mswt.0(f0); f2 = mswt.1(f1); f3 = mswt.2(f2)
    f4 = mswt_m(f3)
    g  = f4 + f2            # small skip
    out = tail(g) + f0      # large skip (or + x with large_skip_source="input")

Parameter names are hierarchical and stable, e.g. ``mswt.0.branch.1.attn_a.wq``.
"""
from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field, replace

import numpy as np

from .swin import BlockConfig, Scope, basic_block_forward, block_param_shapes
from .tensor import Tensor

VARIANTS: dict[str, tuple[bool, bool]] = {
    "r1": (False, False),
    "r2": (True, False),
    "r3": (False, True),
    "sdnet": (True, True),
}


@dataclass(frozen=True)
class ModelConfig:
    block: BlockConfig = field(default_factory=BlockConfig)
    num_branches: int = 3
    num_mswt: int = 3
    skip_small: bool = True
    skip_large: bool = True
    large_skip_source: str = "stem"

    def __post_init__(self):
        if self.num_branches < 2:
            raise ValueError(f"num_branches must be >= 2, got {self.num_branches}")
        if self.num_mswt < 2 and self.skip_small:
            raise ValueError("the small skip taps the second MSwt stage; need num_mswt >= 2")
        if self.large_skip_source not in ("stem", "input"):
            raise ValueError(f"large_skip_source must be 'stem' or 'input', got {self.large_skip_source!r}")

    @classmethod
    def from_variant(cls, variant: str, **kwargs) -> ModelConfig:
        try:
            small, large = VARIANTS[variant.lower()]
        except KeyError:
            raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}") from None
        return cls(skip_small=small, skip_large=large, **kwargs)

    def with_variant(self, variant: str) -> ModelConfig:
        small, large = VARIANTS[variant.lower()]
        return replace(self, skip_small=small, skip_large=large)

    @property
    def variant(self) -> str | None:
        for name, flags in VARIANTS.items():
            if flags == (self.skip_small, self.skip_large):
                return name
        return None


class ParamStore(dict):
    """Ordered ``name -> Tensor`` map; insertion order is the canonical order."""

    def scope(self, prefix: str) -> Scope:
        return Scope(self, prefix)

    def astype(self, dtype) -> ParamStore:
        return ParamStore((k, Tensor(v.data.astype(dtype), requires_grad=True)) for k, v in self.items())

    def copy(self) -> ParamStore:
        return ParamStore((k, Tensor(v.data.copy(), requires_grad=v.requires_grad)) for k, v in self.items())

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def num_scalars(self) -> int:
        return sum(t.size for t in self.values())


def block_prefixes(cfg: ModelConfig) -> list[str]:
    """Every basic block in the network, in forward order."""
    names = ["stem"]
    for i in range(cfg.num_mswt):
        names += [f"mswt.{i}.branch.{j}" for j in range(cfg.num_branches)]
        names.append(f"mswt.{i}.fuse")
    names += [f"mswt_m.branch.{j}" for j in range(cfg.num_branches)]
    names.append("tail")
    return names


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    block = block_param_shapes(cfg.block)
    return {f"{pre}.{name}": shape for pre in block_prefixes(cfg) for name, shape in block.items()}


def param_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def param_count_by_module(cfg: ModelConfig) -> dict[str, int]:
    counts: dict[str, int] = {}
    for name, shape in param_shapes(cfg).items():
        parts = name.split(".")
        module = ".".join(parts[:2]) if parts[0] == "mswt" else parts[0]
        counts[module] = counts.get(module, 0) + int(np.prod(shape))
    return counts


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    # resample draws beyond two standard deviations
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32, std: float = 0.02) -> ParamStore:
    """Truncated-normal weights and relative-bias tables, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(rng, shape, std)
        store[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return store


def mswt_forward(x: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Sum of parallel branch blocks followed by one fusion block."""
    summed = mswt_m_forward(x, params, cfg)
    return basic_block_forward(summed, Scope(params, "fuse"), cfg.block)


def mswt_m_forward(x: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Sum of parallel branch blocks, no fusion."""
    out = None
    for j in range(cfg.num_branches):
        y = basic_block_forward(x, Scope(params, f"branch.{j}"), cfg.block)
        out = y if out is None else out + y
    return out


def sdnet_forward(x: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Predict the clean image (unclamped) from a rainy ``[..., H, W, 3]`` input."""
    f0 = basic_block_forward(x, Scope(params, "stem"), cfg.block)
    feats = [f0]
    for i in range(cfg.num_mswt):
        feats.append(mswt_forward(feats[-1], Scope(params, f"mswt.{i}"), cfg))
    g = mswt_m_forward(feats[-1], Scope(params, "mswt_m"), cfg)
    if cfg.skip_small:
        g = g + feats[2]
    out = basic_block_forward(g, Scope(params, "tail"), cfg.block)
    if cfg.skip_large:
        out = out + (f0 if cfg.large_skip_source == "stem" else x)
    return out
