from __future__ import annotations

from typing import Callable

import numpy as np

from .params import ParamStore
from .tensor import Tensor, no_grad


def _coords(size: int, limit: int, rng: np.random.Generator) -> np.ndarray:
    if size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, size=limit, replace=False))


def grad_check(loss_fn: Callable[[], Tensor], store: ParamStore, h: float = 1e-3,
               max_coords: int = 256, seed: int = 0, names=None, report=None,
               floor: float = 1e-2, fd_dtype=np.float64) -> float:
    """Worst relative discrepancy between analytic and central-difference gradients.

    Per tensor the discrepancy is ``max|a - n| / max(max|a|, max|n|)`` over the
    checked coordinates (all of them, or a seeded subset of ``max_coords`` for
    larger tensors). The denominator is floored at ``floor`` times the largest
    analytic gradient entry in the whole store, so tensors whose true gradient
    is identically zero are not judged on finite-difference round-off alone.
    Analytic gradients come from the store's own precision; the central
    differences are evaluated after upcasting the store to ``fd_dtype``
    (restored afterwards). ``loss_fn`` must be deterministic.
    """
    if not 1e-6 <= h <= 1e-2:
        raise ValueError("h must lie in [1e-6, 1e-2]")
    rng = np.random.default_rng(seed)
    store.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = store.grads()
    gscale = max((float(np.abs(g).max(initial=0.0)) for g in analytic.values()), default=0.0)
    worst = 0.0
    native = store.dtype
    if fd_dtype is not None:
        store.astype(fd_dtype)
    for name in (names or store.names()):
        t = store[name]
        flat = t.data.reshape(-1)
        idx = _coords(flat.size, max_coords, rng)
        a = analytic[name].reshape(-1)[idx].astype(np.float64)
        n = np.empty_like(a)
        with no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                lp = float(loss_fn().data)
                flat[i] = orig - h
                lm = float(loss_fn().data)
                flat[i] = orig
                n[j] = (lp - lm) / (2.0 * h)
        denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor * gscale)
        err = 0.0 if denom == 0.0 else float(np.abs(a - n).max() / denom)
        if report is not None:
            report[name] = err
        worst = max(worst, err)
    store.astype(native)
    return worst
