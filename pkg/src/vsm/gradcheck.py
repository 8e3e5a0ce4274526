"""Central finite-difference checks for analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(
    fn: Callable[[], Tensor],
    tensor: Tensor,
    eps: float = 1e-4,
    indices: Sequence[tuple] | None = None,
) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor``.

    ``fn`` must rebuild its graph from the current ``tensor.data`` on every
    call. When ``indices`` is given only those entries are perturbed and the
    result is a 1-D array aligned with ``indices``.
    """
    flat_positions = list(np.ndindex(tensor.shape)) if indices is None else list(indices)
    out = np.zeros(len(flat_positions), dtype=np.float64)
    with no_grad():
        for n, pos in enumerate(flat_positions):
            original = tensor.data[pos].copy()
            tensor.data[pos] = original + eps
            plus = float(fn().data)
            tensor.data[pos] = original - eps
            minus = float(fn().data)
            tensor.data[pos] = original
            out[n] = (plus - minus) / (2 * eps)
    if indices is None:
        return out.reshape(tensor.shape)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise relative error; magnitudes below ``floor`` count as ``floor``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error between backprop and central differences.

    With ``max_entries`` set, a random subset of at most that many entries
    per tensor is checked.
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    loss.backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if max_entries is not None and t.size > max_entries:
            rng = rng or np.random.default_rng(0)
            flat = rng.choice(t.size, size=max_entries, replace=False)
            idx = [np.unravel_index(i, t.shape) for i in flat]
            numeric = numerical_grad(fn, t, eps, idx)
            picked = np.array([analytic[i] for i in idx])
            worst = max(worst, relative_error(picked, numeric))
        else:
            numeric = numerical_grad(fn, t, eps)
            worst = max(worst, relative_error(analytic, numeric))
    return worst


def spot_check(
    fn: Callable[[], Tensor],
    params: dict,
    n_entries: int = 20,
    eps: float = 1e-6,
    rng: np.random.Generator | None = None,
) -> float:
    """Relative error on ``n_entries`` scalar entries drawn across all ``params``.

    Entries are picked uniformly over the concatenation of every parameter,
    so large tensors are checked in proportion to their size.
    """
    rng = rng or np.random.default_rng(0)
    names = list(params)
    sizes = np.array([params[k].size for k in names])
    flat = rng.choice(sizes.sum(), size=min(n_entries, int(sizes.sum())), replace=False)
    owner = np.searchsorted(np.cumsum(sizes), flat, side="right")
    for t in params.values():
        t.grad = None
    fn().backward()
    analytic, numeric = [], []
    for k, i in zip(owner, flat):
        t = params[names[k]]
        pos = np.unravel_index(int(i - (sizes[:k].sum())), t.shape)
        analytic.append(0.0 if t.grad is None else t.grad[pos])
        numeric.append(numerical_grad(fn, t, eps, [pos])[0])
    return relative_error(np.array(analytic), np.array(numeric))
