"""Wall-time scaling of windowed vs dense attention."""
from __future__ import annotations

import math
import time
from collections.abc import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import init_params
from .swin import BlockConfig, window_attention, window_partition
from .tensor import Tensor


def attention_params(cfg: BlockConfig, seed: int = 0) -> dict[str, Tensor]:
    from .model import ModelConfig
    store = init_params(ModelConfig(block=cfg), seed)
    return dict(store.scope("stem.attn_a").items())


def best_time(fn: Callable[[], object], repeats: int = 3) -> float:
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _dense_chunked(x: Tensor, params, num_heads: int, chunk: int = 1024) -> np.ndarray:
    # query blocks keep the N x N logits out of memory; work is still quadratic
    n = x.shape[-2]
    out = []
    for start in range(0, n, chunk):
        q = Tensor(x.data[start:start + chunk])
        out.append(_dense_rows(q, x, params, num_heads))
    return np.concatenate(out, axis=0)


def _dense_rows(q_tokens: Tensor, kv_tokens: Tensor, params, num_heads: int) -> np.ndarray:
    c = kv_tokens.shape[-1]
    d = c // num_heads
    q = (q_tokens.data @ params["wq"].data + params["bq"].data).reshape(-1, num_heads, d).transpose(1, 0, 2)
    k = (kv_tokens.data @ params["wk"].data + params["bk"].data).reshape(-1, num_heads, d).transpose(1, 0, 2)
    v = (kv_tokens.data @ params["wv"].data + params["bv"].data).reshape(-1, num_heads, d).transpose(1, 0, 2)
    logits = q @ k.transpose(0, 2, 1) / math.sqrt(d)
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    o = (w @ v).transpose(1, 0, 2).reshape(-1, c)
    return o @ params["wo"].data + params["bo"].data


def scaling_times(grids: Sequence[int], cfg: BlockConfig = BlockConfig(), seed: int = 0,
                  repeats: int = 3, dense: bool = True) -> dict[str, list[float]]:
    """Time windowed (and dense) attention on ``G x G`` token grids."""
    params = attention_params(cfg, seed)
    rng = np.random.default_rng(seed)
    out: dict[str, list[float]] = {"n": [], "windowed": [], "dense": []}
    for g in grids:
        x = Tensor(rng.standard_normal((g, g, cfg.embed_dim)).astype(np.float32))
        with T.no_grad():
            win = window_partition(x, cfg.window_size)
            out["windowed"].append(best_time(lambda: window_attention(win, params, cfg.num_heads), repeats))
            if dense:
                flat = x.reshape(g * g, cfg.embed_dim)
                out["dense"].append(best_time(lambda: _dense_chunked(flat, params, cfg.num_heads), repeats))
        out["n"].append(g * g)
    return out


def fit_exponent(ns: Sequence[float], times: Sequence[float]) -> float:
    """Least-squares slope of log(time) against log(n)."""
    return float(np.polyfit(np.log(ns), np.log(times), 1)[0])
