"""Finite-difference gradient oracle and small shared builders for the tests."""
from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from sdnet import tensor as T
from sdnet.tensor import Tensor


def autodiff_grads(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    leaves = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    T.backward(fn(*leaves))
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


def _value(fn, arrays) -> float:
    with T.no_grad():
        return fn(*[Tensor(a, dtype=np.float64) for a in arrays]).item()


def numeric_grads(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-4,
                  entries: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
    """Central differences. ``entries`` optionally restricts which flat indices get probed
    per input (others are left as NaN)."""
    work = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for i, a in enumerate(work):
        g = np.full(a.size, np.nan)
        flat = a.reshape(-1)
        idx = range(a.size) if entries is None or i not in entries else entries[i]
        for j in idx:
            old = flat[j]
            flat[j] = old + h
            fp = _value(fn, work)
            flat[j] = old - h
            fm = _value(fn, work)
            flat[j] = old
            g[j] = (fp - fm) / (2 * h)
        out.append(g.reshape(a.shape))
    return out


ZERO_GRAD_SCALE = 1e-6


def max_rel_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    """Worst over inputs of ``max|a - n| / max(|a|, |n|)`` on the probed entries.

    The denominator is the largest gradient magnitude of that input, so
    entries whose true gradient is ~0 do not blow the ratio up. An input whose
    whole gradient vanishes (a key bias under softmax, say) is compared on an
    absolute scale of ``ZERO_GRAD_SCALE`` instead of its own rounding noise.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        probed = ~np.isnan(n)
        if not probed.any():
            continue
        a, n = a[probed], n[probed]
        scale = max(np.abs(a).max(), np.abs(n).max(), ZERO_GRAD_SCALE)
        worst = max(worst, float(np.abs(a - n).max() / scale))
    return worst


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-4,
              entries: dict[int, np.ndarray] | None = None) -> float:
    return max_rel_error(autodiff_grads(fn, arrays), numeric_grads(fn, arrays, h, entries))


def projected(op: Callable[..., Tensor], out_shape, seed: int = 0) -> Callable[..., Tensor]:
    """Scalarize an op's output with a fixed random weighting."""
    w = np.random.default_rng(seed).standard_normal(out_shape)

    def fn(*xs):
        return T.sum_(op(*xs) * Tensor(w, dtype=np.float64))

    return fn
