"""Named parameter storage, initialisation and the plain-text/binary checkpoint."""

from __future__ import annotations

import io
import os
from collections import OrderedDict

import numpy as np

from .tensor import Tensor


class CheckpointError(IOError):
    pass


class ParamStore:
    """Ordered name -> Tensor map. Gradients live on each tensor's ``.grad``."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self):
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in self._params.items()}

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def astype(self, dtype) -> "ParamStore":
        """In-place precision change (used by the float64 gradient checks)."""
        self.dtype = np.dtype(dtype)
        for t in self._params.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items() if n.startswith(prefix)}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True):
        for name, arr in state.items():
            if name not in self._params:
                if strict:
                    raise CheckpointError(f"unexpected parameter {name!r} in checkpoint")
                continue
            t = self._params[name]
            if tuple(arr.shape) != t.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {arr.shape}, model {t.shape}")
            t.data = np.array(arr, dtype=self.dtype)
        if strict:
            missing = [n for n in self._params if n not in state]
            if missing:
                raise CheckpointError(f"checkpoint missing parameters: {missing[:5]}")


class Init:
    """Seeded initialiser: fan-in scaled uniform weights, zero biases."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def weight(self, fan_in: int, fan_out: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return self.rng.uniform(-bound, bound, size=(fan_in, fan_out))

    def table(self, rows: int, cols: int, std: float = 0.02) -> np.ndarray:
        return self.rng.normal(0.0, std, size=(rows, cols))

    @staticmethod
    def zeros(*shape) -> np.ndarray:
        return np.zeros(shape)

    @staticmethod
    def ones(*shape) -> np.ndarray:
        return np.ones(shape)


def save_checkpoint(path, tensors: dict[str, np.ndarray]):
    """Write ``name shape...`` header lines, a blank line, then raw LE float32."""
    header = io.StringIO()
    for name, arr in tensors.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"parameter name contains whitespace: {name!r}")
        header.write(" ".join([name, *map(str, arr.shape)]) + "\n")
    header.write("\n")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header.getvalue().encode("ascii"))
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise CheckpointError(f"{path}: missing header terminator")
    lines = raw[:sep].decode("ascii").splitlines() if sep else []
    body = memoryview(raw)[sep + 2:]
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    offset = 0
    for line in lines:
        name, *dims = line.split()
        shape = tuple(int(d) for d in dims)
        n = int(np.prod(shape)) if shape else 1
        nbytes = 4 * n
        if offset + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated data for {name}")
        out[name] = np.frombuffer(body[offset:offset + nbytes], dtype="<f4").reshape(shape).copy()
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes")
    return out
