"""Modified Swin basic block: an image-shaped map in, an image-shaped map out.

Token layout conventions (part of the checkpoint contract):

* patch tokens flatten each ``p x p`` patch in (row, col, channel) order;
* tokens are listed in raster order over the patch grid;
* windows are listed in raster order over the window grid, tokens inside a
  window in raster order too.

Leading batch dimensions are carried through every function here.
"""
from __future__ import annotations

import functools
import math
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MASK_VALUE = -1e9


@dataclass(frozen=True)
class BlockConfig:
    patch_size: int = 3
    window_size: int = 7
    num_heads: int = 3
    embed_dim: int = 54
    shift_size: int | None = None
    mlp_ratio: int = 4
    in_chans: int = 3

    def __post_init__(self):
        if self.shift_size is None:
            object.__setattr__(self, "shift_size", self.window_size // 2)
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if not 0 <= self.shift_size < self.window_size:
            raise ValueError(f"shift_size must be in [0, {self.window_size}), got {self.shift_size}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def token_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_chans

    @property
    def multiple(self) -> int:
        """Image sides must be multiples of this."""
        return self.patch_size * self.window_size

    def check_input(self, h: int, w: int) -> None:
        p, m = self.patch_size, self.window_size
        if h % p or w % p:
            raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
        if (h // p) % m or (w // p) % m:
            raise ShapeError(f"patch grid {h // p}x{w // p} not divisible by window size {m}")


# ---------------------------------------------------------------------------
# lossless reshapes
# ---------------------------------------------------------------------------

def patch_partition(x: Tensor, p: int) -> Tensor:
    """``[..., H, W, C] -> [..., (H/p)(W/p), p*p*C]``."""
    *lead, h, w, c = x.shape
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    n = len(lead)
    t = x.reshape(*lead, h // p, p, w // p, p, c)
    t = t.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return t.reshape(*lead, (h // p) * (w // p), p * p * c)


def unpatch_partition(tokens: Tensor, p: int, h: int, w: int) -> Tensor:
    """Exact inverse of :func:`patch_partition`."""
    *lead, count, dim = tokens.shape
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    if count != (h // p) * (w // p) or dim % (p * p):
        raise ShapeError(f"tokens {tokens.shape} do not tile a {h}x{w} image with patch {p}")
    c = dim // (p * p)
    n = len(lead)
    t = tokens.reshape(*lead, h // p, w // p, p, p, c)
    t = t.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return t.reshape(*lead, h, w, c)


def window_partition(x: Tensor, m: int) -> Tensor:
    """``[..., Gh, Gw, C] -> [..., (Gh/M)(Gw/M), M*M, C]``."""
    *lead, gh, gw, c = x.shape
    if gh % m or gw % m:
        raise ShapeError(f"grid {gh}x{gw} not divisible by window size {m}")
    n = len(lead)
    t = x.reshape(*lead, gh // m, m, gw // m, m, c)
    t = t.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return t.reshape(*lead, (gh // m) * (gw // m), m * m, c)


def window_reverse(windows: Tensor, m: int, gh: int, gw: int) -> Tensor:
    *lead, nw, mm, c = windows.shape
    if gh % m or gw % m or nw != (gh // m) * (gw // m) or mm != m * m:
        raise ShapeError(f"windows {windows.shape} do not tile a {gh}x{gw} grid with window {m}")
    n = len(lead)
    t = windows.reshape(*lead, gh // m, gw // m, m, m, c)
    t = t.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return t.reshape(*lead, gh, gw, c)


# ---------------------------------------------------------------------------
# positional bias and masks
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def relative_position_index(m: int) -> np.ndarray:
    """``[M*M, M*M]`` indices into the ``(2M-1)^2`` relative-bias table."""
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (m - 1)
    idx = rel[0] * (2 * m - 1) + rel[1]
    idx.setflags(write=False)
    return idx


def _grid(g) -> tuple[int, int]:
    return (g, g) if isinstance(g, int) else (int(g[0]), int(g[1]))


@functools.lru_cache(maxsize=None)
def _shift_mask_array(gh: int, gw: int, m: int, s: int) -> np.ndarray:
    region = np.zeros((gh, gw), dtype=np.int64)
    cuts = (slice(0, -m), slice(-m, -s), slice(-s, None))
    label = 0
    for hs in cuts:
        for ws in cuts:
            region[hs, ws] = label
            label += 1
    win = region.reshape(gh // m, m, gw // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)
    mask = np.where(win[:, :, None] != win[:, None, :], MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


def build_shift_mask(g, m: int, s: int, dtype=np.float32) -> Tensor:
    """Additive logit mask ``[nW, M*M, M*M]`` for the cyclically shifted grid.

    ``g`` is the patch-grid side (or an ``(Gh, Gw)`` pair). Pairs of tokens that
    came from different regions before the roll get ``MASK_VALUE``.
    """
    if s == 0:
        raise ValueError("shift size 0 needs no mask; skip masking instead")
    if not 0 < s < m:
        raise ValueError(f"shift size must be in (0, {m}), got {s}")
    gh, gw = _grid(g)
    if gh % m or gw % m:
        raise ShapeError(f"grid {gh}x{gw} not divisible by window size {m}")
    return Tensor(_shift_mask_array(gh, gw, m, s), dtype=dtype)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def _split_heads(t: Tensor, h: int) -> Tensor:
    *lead, n, c = t.shape
    k = len(lead)
    return t.reshape(*lead, n, h, c // h).permute(*range(k), k + 1, k, k + 2)


def _merge_heads(t: Tensor) -> Tensor:
    *lead, h, n, d = t.shape
    k = len(lead)
    return t.permute(*range(k), k + 1, k, k + 2).reshape(*lead, n, h * d)


def attention_probs(x: Tensor, params: Mapping[str, Tensor], num_heads: int,
                    mask: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Post-softmax attention weights ``[..., nW, h, N, N]`` and values ``[..., nW, h, N, d]``."""
    *lead, nw, n, c = x.shape
    m = math.isqrt(n)
    if m * m != n:
        raise ShapeError(f"window token count {n} is not a square")
    if mask is not None and mask.shape != (nw, n, n):
        raise ShapeError(f"mask shape {mask.shape} does not match windows {(nw, n, n)}")
    d = c // num_heads
    q = _split_heads(T.linear(x, params["wq"], params["bq"]), num_heads)
    k = _split_heads(T.linear(x, params["wk"], params["bk"]), num_heads)
    v = _split_heads(T.linear(x, params["wv"], params["bv"]), num_heads)

    logits = T.scale(q @ k.transpose(-1, -2), 1.0 / math.sqrt(d))
    bias = T.take(params["rel_bias"], relative_position_index(m))  # [N, N, h]
    logits = logits + bias.permute(2, 0, 1)
    if mask is not None:
        logits = logits + mask.reshape(nw, 1, n, n)
    return T.softmax(logits, axis=-1), v


def window_attention(x: Tensor, params: Mapping[str, Tensor], num_heads: int,
                     mask: Tensor | None = None) -> Tensor:
    """Multi-head self-attention inside each window, with relative position bias.

    ``x`` is ``[..., nW, N, C]`` with ``N = M*M``; ``mask`` if given is
    ``[nW, N, N]`` and is added to the logits of every head.
    """
    attn, v = attention_probs(x, params, num_heads, mask)
    return T.linear(_merge_heads(attn @ v), params["wo"], params["bo"])


def dense_attention(x: Tensor, params: Mapping[str, Tensor], num_heads: int) -> Tensor:
    """Plain global multi-head attention over ``[..., N, C]`` (no positional bias)."""
    d = x.shape[-1] // num_heads
    q = _split_heads(T.linear(x, params["wq"], params["bq"]), num_heads)
    k = _split_heads(T.linear(x, params["wk"], params["bk"]), num_heads)
    v = _split_heads(T.linear(x, params["wv"], params["bv"]), num_heads)
    attn = T.softmax(T.scale(q @ k.transpose(-1, -2), 1.0 / math.sqrt(d)), axis=-1)
    return T.linear(_merge_heads(attn @ v), params["wo"], params["bo"])


# ---------------------------------------------------------------------------
# the block
# ---------------------------------------------------------------------------

class Scope(Mapping):
    """Read-only view of a parameter mapping under a dotted prefix."""

    def __init__(self, params: Mapping[str, Tensor], prefix: str):
        self._params = params
        self._prefix = prefix + "." if prefix else ""

    def __getitem__(self, key: str) -> Tensor:
        return self._params[self._prefix + key]

    def __iter__(self):
        n = len(self._prefix)
        return (k[n:] for k in self._params if k.startswith(self._prefix))

    def __len__(self) -> int:
        return sum(1 for _ in self)

    def scope(self, prefix: str) -> Scope:
        return Scope(self, prefix)


def block_param_shapes(cfg: BlockConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of one basic block's parameters, in canonical order."""
    c, t = cfg.embed_dim, cfg.token_dim
    hidden = cfg.mlp_ratio * c
    table = (2 * cfg.window_size - 1) ** 2
    shapes: dict[str, tuple[int, ...]] = {"embed.weight": (t, c), "embed.bias": (c,)}
    for sub in ("attn_a", "attn_b"):
        shapes.update({
            f"{sub}.norm1.gamma": (c,), f"{sub}.norm1.beta": (c,),
            f"{sub}.wq": (c, c), f"{sub}.bq": (c,),
            f"{sub}.wk": (c, c), f"{sub}.bk": (c,),
            f"{sub}.wv": (c, c), f"{sub}.bv": (c,),
            f"{sub}.wo": (c, c), f"{sub}.bo": (c,),
            f"{sub}.rel_bias": (table, cfg.num_heads),
            f"{sub}.norm2.gamma": (c,), f"{sub}.norm2.beta": (c,),
            f"{sub}.mlp.w1": (c, hidden), f"{sub}.mlp.b1": (hidden,),
            f"{sub}.mlp.w2": (hidden, c), f"{sub}.mlp.b2": (c,),
        })
    shapes.update({"unembed.weight": (c, t), "unembed.bias": (t,)})
    return shapes


def linear_embed(tokens: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return T.linear(tokens, weight, bias)


def _mlp(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    return T.linear(T.gelu(T.linear(x, p["mlp.w1"], p["mlp.b1"])), p["mlp.w2"], p["mlp.b2"])


def transformer_sub_block(grid: Tensor, p: Mapping[str, Tensor], cfg: BlockConfig, shift: int) -> Tensor:
    """Pre-norm (S)W-MSA + MLP with residual adds over a ``[..., Gh, Gw, C]`` token grid."""
    *_, gh, gw, c = grid.shape
    m = cfg.window_size
    h = T.layer_norm(grid, p["norm1.gamma"], p["norm1.beta"])
    mask = None
    if shift:
        h = T.roll(h, (-shift, -shift), (-3, -2))
        mask = build_shift_mask((gh, gw), m, shift, dtype=grid.dtype)
    win = window_attention(window_partition(h, m), p, cfg.num_heads, mask)
    h = window_reverse(win, m, gh, gw)
    if shift:
        h = T.roll(h, (shift, shift), (-3, -2))
    grid = grid + h
    return grid + _mlp(T.layer_norm(grid, p["norm2.gamma"], p["norm2.beta"]), p)


def basic_block_forward(x: Tensor, params: Mapping[str, Tensor], cfg: BlockConfig) -> Tensor:
    """``[..., H, W, 3] -> [..., H, W, 3]`` through one W-MSA / SW-MSA pair."""
    *lead, h, w, _ = x.shape
    cfg.check_input(h, w)
    p = cfg.patch_size
    gh, gw = h // p, w // p
    tokens = linear_embed(patch_partition(x, p), params["embed.weight"], params["embed.bias"])
    grid = tokens.reshape(*lead, gh, gw, cfg.embed_dim)
    grid = transformer_sub_block(grid, Scope(params, "attn_a"), cfg, 0)
    grid = transformer_sub_block(grid, Scope(params, "attn_b"), cfg, cfg.shift_size)
    tokens = T.linear(grid.reshape(*lead, gh * gw, cfg.embed_dim),
                      params["unembed.weight"], params["unembed.bias"])
    return unpatch_partition(tokens, p, h, w)
