from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array([self.step], dtype=np.float32)}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        self.step = int(arrays["adam.step"][0])
        self.m = {k[len("adam.m."):]: np.array(a) for k, a in arrays.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: np.array(a) for k, a in arrays.items() if k.startswith("adam.v.")}


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    total = 0.0
    for _, t in store.items():
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        c = store.dtype.type(max_norm / (norm + 1e-6))
        for _, t in store.items():
            if t.grad is not None:
                t.grad = t.grad * c
    return norm


def adam_step(store: ParamStore, state: AdamState) -> None:
    """One bias-corrected Adam update of every parameter that has a gradient."""
    for name, t in store.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in store.items():
        g = t.grad
        if g is None:
            continue
        dt = t.data.dtype
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        else:
            v = state.v[name]
        m = (b1 * m + (1.0 - b1) * g).astype(dt)
        v = (b2 * v + (1.0 - b2) * g * g).astype(dt)
        state.m[name] = m
        state.v[name] = v
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        t.data = (t.data - upd).astype(dt)
