"""Forward/backward layers for the grader network.

Every layer keeps its trainable arrays in ``params`` and the matching
gradients in ``grads`` (same keys, same shapes). Non-trainable arrays, such
as batch-norm running statistics, live in ``state``. ``forward`` stores what
``backward`` needs in ``self.cache``; ``backward`` consumes it, so calling it
twice for one forward raises :class:`CacheError`.

Batched shapes: ids ``[B, T]``, sequences ``[B, T, C]``, vectors ``[B, D]``.
"""
from __future__ import annotations

import numpy as np

from .tensor import DTYPE, SeededRng, ShapeError, glorot_init, softmax_rows


class CacheError(RuntimeError):
    pass


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.state: dict[str, np.ndarray] = {}
        self.cache = None

    def zero_grad(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def _accumulate(self, name: str, g: np.ndarray) -> None:
        if name in self.grads:
            self.grads[name] = self.grads[name] + g
        else:
            self.grads[name] = g

    def _pop_cache(self):
        if self.cache is None:
            raise CacheError(f"{type(self).__name__}.backward called without a matching forward")
        cache, self.cache = self.cache, None
        return cache


class Embedding(Layer):
    def __init__(self, vocab_size: int, dim: int, rng: SeededRng):
        super().__init__()
        self.params["table"] = glorot_init((vocab_size, dim), rng)

    def forward(self, ids: np.ndarray) -> np.ndarray:
        table = self.params["table"]
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise IndexError(f"token id out of range for vocabulary of size {table.shape[0]}")
        self.cache = ids
        return table[ids]

    def backward(self, dout: np.ndarray) -> None:
        ids = self._pop_cache()
        table = self.params["table"]
        dtable = np.zeros_like(table)
        np.add.at(dtable, ids.reshape(-1), dout.reshape(-1, table.shape[1]))
        self._accumulate("table", dtable)
        return None


class ConvEncoder(Layer):
    """1-D cross-correlation over time with same zero padding, bias and ReLU."""

    def __init__(self, in_channels: int, filters: int, kernel_size: int, rng: SeededRng):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("same padding needs an odd kernel size")
        self.params["kernel"] = glorot_init((kernel_size, in_channels, filters), rng)
        self.params["bias"] = np.zeros(filters, dtype=DTYPE)

    def _columns(self, x: np.ndarray) -> np.ndarray:
        k = self.params["kernel"].shape[0]
        pad = k // 2
        T = x.shape[1]
        xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
        return np.concatenate([xp[:, j : j + T] for j in range(k)], axis=2)

    def forward(self, x: np.ndarray) -> np.ndarray:
        kernel = self.params["kernel"]
        k, cin, cout = kernel.shape
        if x.ndim != 3 or x.shape[2] != cin:
            raise ShapeError(f"conv expects [B, T, {cin}] input, got {x.shape}")
        cols = self._columns(x)
        pre = cols @ kernel.reshape(k * cin, cout) + self.params["bias"]
        self.cache = (x.shape, cols, pre)
        return np.maximum(pre, 0.0)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x_shape, cols, pre = self._pop_cache()
        kernel = self.params["kernel"]
        k, cin, cout = kernel.shape
        dpre = dout * (pre > 0)
        flat = dpre.reshape(-1, cout)
        self._accumulate("kernel", (cols.reshape(-1, k * cin).T @ flat).reshape(kernel.shape))
        self._accumulate("bias", flat.sum(axis=0))
        dcols = dpre @ kernel.reshape(k * cin, cout).T
        B, T, _ = x_shape
        pad = k // 2
        dxp = np.zeros((B, T + 2 * pad, cin), dtype=DTYPE)
        for j in range(k):
            dxp[:, j : j + T] += dcols[:, :, j * cin : (j + 1) * cin]
        return dxp[:, pad : pad + T]


class DotProductAttention(Layer):
    """softmax(q vᵀ) v, optionally scaled by 1/sqrt(d)."""

    def __init__(self, scaled: bool = False):
        super().__init__()
        self.scaled = scaled

    def forward(self, q: np.ndarray, v: np.ndarray) -> np.ndarray:
        if q.shape != v.shape:
            raise ShapeError(f"attention needs equal q/v shapes, got {q.shape} and {v.shape}")
        scale = 1.0 / np.sqrt(q.shape[-1]) if self.scaled else 1.0
        weights = softmax_rows(scale * (q @ np.swapaxes(v, -1, -2)))
        self.cache = (q, v, weights, scale)
        self.weights = weights
        return weights @ v

    def backward(self, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q, v, w, scale = self._pop_cache()
        dw = dout @ np.swapaxes(v, -1, -2)
        ds = w * (dw - (dw * w).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ v
        dv = np.swapaxes(w, -1, -2) @ dout + np.swapaxes(ds, -1, -2) @ q
        return dq, dv


class GlobalAvgPool(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] == 0:
            raise ShapeError("global average over an empty time axis")
        self.cache = x.shape
        return x.mean(axis=1)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        B, T, D = self._pop_cache()
        return np.broadcast_to(dout[:, None, :] / T, (B, T, D)).copy()


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-rate) while training."""

    def __init__(self, rate: float = 0.25):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x: np.ndarray, training: bool, rng: SeededRng | None = None) -> np.ndarray:
        if not training or self.rate == 0.0:
            self.cache = None
            self.mask = None
            return x
        if rng is None:
            raise ValueError("dropout in training mode needs a generator")
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        self.cache = mask
        self.mask = mask
        return x * mask

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self.cache is None:
            # inference or rate 0: identity
            return dout
        return dout * self._pop_cache()


class BatchNorm(Layer):
    def __init__(self, dim: int, momentum: float = 0.99, epsilon: float = 1e-3):
        super().__init__()
        self.momentum = momentum
        self.epsilon = epsilon
        self.params["gamma"] = np.ones(dim, dtype=DTYPE)
        self.params["beta"] = np.zeros(dim, dtype=DTYPE)
        self.state["running_mean"] = np.zeros(dim, dtype=DTYPE)
        self.state["running_var"] = np.ones(dim, dtype=DTYPE)

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        gamma, beta = self.params["gamma"], self.params["beta"]
        if x.ndim != 2 or x.shape[1] != gamma.shape[0]:
            raise ShapeError(f"batchnorm expects [B, {gamma.shape[0]}], got {x.shape}")
        if training:
            if x.shape[0] < 2:
                raise ValueError(f"batchnorm training needs a batch of at least 2, got {x.shape[0]}")
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            m = self.momentum
            self.state["running_mean"] = m * self.state["running_mean"] + (1 - m) * mu
            self.state["running_var"] = m * self.state["running_var"] + (1 - m) * var
        else:
            mu, var = self.state["running_mean"], self.state["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mu) * inv_std
        self.cache = (xhat, inv_std, training)
        return gamma * xhat + beta

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xhat, inv_std, training = self._pop_cache()
        gamma = self.params["gamma"]
        self._accumulate("gamma", (dout * xhat).sum(axis=0))
        self._accumulate("beta", dout.sum(axis=0))
        dxhat = dout * gamma
        if not training:
            return dxhat * inv_std
        # gradient through the batch mean and biased batch variance
        return inv_std * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))


ACTIVATIONS = ("tanh", "sigmoid", "softmax", "linear")


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(z)
    if activation == "sigmoid":
        return sigmoid(z)
    if activation == "softmax":
        return softmax_rows(z)
    if activation == "linear":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def activation_backward(y: np.ndarray, dy: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return dy * (1.0 - y * y)
    if activation == "sigmoid":
        return dy * y * (1.0 - y)
    if activation == "softmax":
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True))
    return dy


class Dense(Layer):
    def __init__(self, in_dim: int, out_dim: int, activation: str, rng: SeededRng):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.params["weights"] = glorot_init((in_dim, out_dim), rng)
        self.params["bias"] = np.zeros(out_dim, dtype=DTYPE)

    def forward(self, x: np.ndarray, activation: str | None = None) -> np.ndarray:
        W = self.params["weights"]
        if x.ndim != 2 or x.shape[1] != W.shape[0]:
            raise ShapeError(f"dense expects [B, {W.shape[0]}], got {x.shape}")
        act = activation or self.activation
        y = activate(x @ W + self.params["bias"], act)
        self.cache = (x, y, act)
        return y

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x, y, act = self._pop_cache()
        dz = activation_backward(y, dout, act)
        self._accumulate("weights", x.T @ dz)
        self._accumulate("bias", dz.sum(axis=0))
        return dz @ self.params["weights"].T
