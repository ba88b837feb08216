"""Dense float64 array primitives and the seeded generator used by every layer.

Arrays are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. The helpers here check shapes at the boundary and raise
:class:`ShapeError` instead of relying on numpy broadcasting.

The generator is numpy's PCG64 bit generator. Its output stream for a given
seed is fixed by the algorithm, so draws are reproducible across platforms.
Child generators for folds are derived with ``SeedSequence`` spawn keys so a
fold's stream depends only on (master seed, fold index).
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class SeededRng:
    """Single-owner deterministic generator (PCG64)."""

    def __init__(self, seed: int, spawn_key: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *key: int) -> "SeededRng":
        """Independent generator keyed by ``key``; does not consume draws from self."""
        return SeededRng(self.seed, self.spawn_key + tuple(key))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return np.asarray(self._gen.uniform(low, high, size=shape), dtype=DTYPE)

    def random(self, shape) -> np.ndarray:
        return self._gen.random(size=shape, dtype=DTYPE)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, options, p=None):
        idx = self._gen.choice(len(options), p=p)
        return options[int(idx)]


def as_tensor(x, shape: tuple[int, ...] | None = None) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if shape is not None and arr.shape != tuple(shape):
        raise ShapeError(f"expected shape {tuple(shape)}, got {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with max subtraction."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def glorot_limit(shape: tuple[int, ...]) -> float:
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        # leading axes are the receptive field (conv kernels are [k, in, out])
        receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
        fan_in = shape[-2] * receptive
        fan_out = shape[-1] * receptive
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def glorot_init(shape, rng: SeededRng) -> np.ndarray:
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d <= 0 for d in shape):
        raise ShapeError(f"glorot_init needs positive dimensions, got {shape}")
    limit = glorot_limit(shape)
    return rng.uniform(-limit, limit, shape)


def mean_axis0(x: np.ndarray) -> np.ndarray:
    if x.ndim < 1 or x.shape[0] == 0:
        raise ShapeError(f"mean over an empty axis 0 (shape {x.shape})")
    return x.sum(axis=0) / x.shape[0]
