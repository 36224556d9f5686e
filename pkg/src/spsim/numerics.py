"""Small dense-tensor toolkit used by the simulator.

Everything runs in float64 on the CPU. The point is determinism and
testability, not speed: the same inputs must produce the same bits on
every platform, so results computed on P logical devices can be compared
against a single-device reference at tight tolerances.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_MASK64 = (1 << 64) - 1

# Identifier for the random stream format. Bump only if the underlying
# bit generator or the derivation scheme in SeededRng.split changes.
RNG_ALGORITHM = "philox4x64-v1"


def make_tensor(values, shape: Sequence[int] | None = None) -> np.ndarray:
    """Build a row-major float64 array, rejecting NaN/inf at construction."""
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None:
        expected = 1
        for s in shape:
            expected *= s
        if arr.size != expected:
            raise ValueError(
                f"shape {tuple(shape)} wants {expected} elements, got {arr.size}"
            )
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor values must be finite (no NaN/inf)")
    return np.ascontiguousarray(arr)


class SeededRng:
    """Counter-based random stream with reproducible substreams.

    Equal seeds give bit-identical value streams across runs and platforms
    (Philox is a pure counter-based generator and numpy guarantees stream
    stability for a fixed bit generator). Substreams are derived by XOR-ing
    a tag into the seed, so e.g. per-device noise is `base.split(rank)` and
    can be regenerated anywhere without communication.
    """

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def split(self, tag: int) -> "SeededRng":
        """Derive an independent stream as seed XOR tag.

        Callers are responsible for using disjoint tag spaces (e.g. device
        ranks vs. frame indices) when both kinds of substream coexist.
        """
        return SeededRng(self.seed ^ (int(tag) & _MASK64))

    def normal(self, shape: Sequence[int] | int = ()) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64)

    def uniform(self, shape: Sequence[int] | int = ()) -> np.ndarray:
        return self._gen.random(size=shape, dtype=np.float64)

    def integers(self, low: int, high: int, shape: Sequence[int] | int = ()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dims disagree: {a.shape} @ {b.shape}")
    return a @ b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int) -> np.ndarray:
    """Multi-head scaled dot-product attention on [s, d] inputs.

    The feature dim is split into `heads` equal slices; each head attends
    independently at scale 1/sqrt(d_head); head outputs are concatenated.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("attention expects 2-D q/k/v")
    s, d = q.shape
    if k.shape != v.shape or k.shape[1] != d:
        raise ValueError(f"q/k/v shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    if d % heads != 0:
        raise ValueError(f"feature dim {d} not divisible by {heads} heads")
    dh = d // heads
    out = np.empty_like(q)
    scale = 1.0 / np.sqrt(dh)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = (q[:, sl] @ k[:, sl].T) * scale
        out[:, sl] = softmax_rows(scores) @ v[:, sl]
    return out


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
