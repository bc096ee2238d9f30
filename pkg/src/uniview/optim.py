"""Named parameter store, Adam, and the binary checkpoint format.

Checkpoint layout ("UVCK0001"): 8 magic bytes, then one record per
parameter in sorted name order:

    u32 name_len | name utf-8 | u32 ndim | u32 dim... | float64 LE data

Everything little-endian; float64 regardless of the training dtype so a
checkpoint is bit-exact reproducible.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

CHECKPOINT_MAGIC = b"UVCK0001"


class ParamStore:
    """Named trainable tensors with per-group freeze flags."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return ((n, self._params[n]) for n in self.names())

    def freeze_group(self, prefix: str) -> int:
        """Freeze every parameter whose name starts with `prefix`. Returns the count."""
        hit = [n for n in self._params if n.startswith(prefix)]
        self._frozen.update(hit)
        return len(hit)

    def frozen_names(self) -> set[str]:
        return set(self._frozen)

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def trainable(self):
        return [(n, self._params[n]) for n in self.names() if n not in self._frozen]

    def zero_grads(self):
        for t in self._params.values():
            t.zero_grad()

    def astype(self, dtype):
        for t in self._params.values():
            t.data = t.data.astype(dtype)
            t.grad = None

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        """Copy arrays into matching parameters (cast to the current dtype)."""
        for name, arr in state.items():
            if name not in self._params:
                if strict:
                    raise KeyError(f"checkpoint parameter {name!r} not present in model")
                continue
            t = self._params[name]
            if t.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name!r}: model {t.shape} vs checkpoint {arr.shape}")
            t.data = arr.astype(t.data.dtype)
            t.grad = None


class AdamState:
    """Per-parameter Adam moments plus hyperparameters."""

    def __init__(self, store: ParamStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in store.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in store.items()}


def adam_step(store: ParamStore, state: AdamState):
    """One bias-corrected Adam update over the unfrozen parameters.

    Frozen parameters (and their moments) are untouched. A missing
    gradient on an unfrozen parameter is an error; all gradients are
    cleared afterward.
    """
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in store.items():
        if store.is_frozen(name):
            continue
        if p.grad is None:
            raise ValueError(f"unfrozen parameter {name!r} has no gradient")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    store.zero_grads()


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------

def save_checkpoint(path, store: ParamStore):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name, t in store.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {blob[:8]!r}")
    out = {}
    off = 8
    while off < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        out[name] = arr.copy()
    return out
