"""Minimal feed-forward substrate: MLPs with hand-written backprop.

Sized for the tiny per-agent networks this lab needs (inputs of dimension
O(N), one or two hidden layers).  No autodiff graph, no GPU: float64
numpy throughout, which keeps gradient checks tight and runs bit-identical
for a fixed seed in single-threaded mode.

A single Mlp instance must not be mutated from two threads; forward passes
on an unchanging net are safe concurrently.
"""

from __future__ import annotations

import struct
from typing import Sequence

import numpy as np

_ACTIVATIONS = ("linear", "tanh", "relu", "sigmoid")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "linear":
        return z
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, out: np.ndarray) -> np.ndarray:
    """Derivative of the activation expressed through its output value."""
    if name == "linear":
        return np.ones_like(out)
    if name == "tanh":
        return 1.0 - out**2
    if name == "relu":
        return (out > 0).astype(float)
    if name == "sigmoid":
        return out * (1.0 - out)
    raise ValueError(f"unknown activation {name!r}")


class Mlp:
    """Fully connected net: tanh hidden layers, linear output by default.

    weights[k] has shape (d_in, d_out); biases[k] has shape (d_out,).
    The parameter count is fixed at construction.
    """

    def __init__(
        self,
        layer_dims: Sequence[int],
        hidden_activation: str = "tanh",
        output_activation: str = "linear",
        rng: np.random.Generator | None = None,
    ):
        if len(layer_dims) < 2:
            raise ValueError("need at least an input and an output dimension")
        for name in (hidden_activation, output_activation):
            if name not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")
        self.layer_dims = tuple(int(d) for d in layer_dims)
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        rng = rng or np.random.default_rng(0)
        for d_in, d_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            bound = 1.0 / np.sqrt(d_in)  # scaled-uniform fan-in init
            self.weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
            self.biases.append(np.zeros(d_out))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def _activation_for(self, layer: int) -> str:
        return self.output_activation if layer == self.n_layers - 1 else self.hidden_activation

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the net on a single input vector or a (B, d_in) batch."""
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Forward pass that also returns per-layer outputs for backward()."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        h = x.reshape(1, -1) if squeeze else x
        if h.shape[1] != self.layer_dims[0]:
            raise ValueError(
                f"input dim {h.shape[1]} does not match layer_dims[0]={self.layer_dims[0]}"
            )
        cache = [h]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = _act(self._activation_for(k), h @ w + b)
            cache.append(h)
        return (h[0] if squeeze else h), cache

    def backward(
        self, cache: list[np.ndarray], upstream: np.ndarray
    ) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Backpropagate an upstream gradient through a cached forward pass.

        Returns ([(dW, db) per layer], gradient w.r.t. the input), with the
        same leading batch shape as the cached pass.
        """
        upstream = np.asarray(upstream, dtype=float)
        squeeze = upstream.ndim == 1
        g = upstream.reshape(1, -1) if squeeze else upstream
        if g.shape != cache[-1].shape:
            raise ValueError(f"upstream shape {g.shape} != output shape {cache[-1].shape}")
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * self.n_layers
        for k in range(self.n_layers - 1, -1, -1):
            g = g * _act_grad(self._activation_for(k), cache[k + 1])
            grads[k] = (cache[k].T @ g, g.sum(axis=0))
            g = g @ self.weights[k].T
        return grads, (g[0] if squeeze else g)

    def parameters(self) -> list[np.ndarray]:
        """Flat view of all parameter arrays (weights then bias per layer)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.layer_dims = self.layer_dims
        clone.hidden_activation = self.hidden_activation
        clone.output_activation = self.output_activation
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone

    def architecture(self) -> tuple:
        return (self.layer_dims, self.hidden_activation, self.output_activation)


def soft_update(target: Mlp, online: Mlp, tau: float) -> None:
    """Move every target parameter a fraction tau toward the online value."""
    if target.architecture() != online.architecture():
        raise ValueError("target and online architectures differ")
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    for p_t, p_o in zip(target.parameters(), online.parameters()):
        p_t *= 1.0 - tau
        p_t += tau * p_o


class Adam:
    """Adaptive-moment optimizer bound to one net's parameters."""

    def __init__(self, net: Mlp, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.net = net
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in net.parameters()]
        self.v = [np.zeros_like(p) for p in net.parameters()]

    def step(self, grads: list[tuple[np.ndarray, np.ndarray]]) -> None:
        """Apply one descent step given per-layer (dW, db) gradients."""
        flat = []
        for dw, db in grads:
            flat.extend((dw, db))
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(self.net.parameters(), flat, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# Checkpoints: documented binary layout (see docs/formats.md)
# ---------------------------------------------------------------------------

_MAGIC = b"DVCGNET1"
_ACT_CODE = {name: i for i, name in enumerate(_ACTIVATIONS)}
_ACT_NAME = {i: name for name, i in _ACT_CODE.items()}


def save_checkpoint(path, nets: dict[str, Mlp]) -> None:
    """Write named nets to a binary checkpoint.

    Layout: magic, u32 net count, then per net: u32 name length + utf-8
    name, u8 hidden/output activation codes, u32 layer count, u32 dims,
    then row-major float64 weight and bias arrays layer by layer.
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(nets)))
        for name, net in nets.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", _ACT_CODE[net.hidden_activation],
                                 _ACT_CODE[net.output_activation]))
            fh.write(struct.pack("<I", len(net.layer_dims)))
            fh.write(struct.pack(f"<{len(net.layer_dims)}I", *net.layer_dims))
            for w, b in zip(net.weights, net.biases):
                fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, Mlp]:
    """Inverse of save_checkpoint."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (count,) = struct.unpack("<I", fh.read(4))
        nets = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            hidden_code, output_code = struct.unpack("<BB", fh.read(2))
            (n_dims,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{n_dims}I", fh.read(4 * n_dims))
            net = Mlp.__new__(Mlp)
            net.layer_dims = dims
            net.hidden_activation = _ACT_NAME[hidden_code]
            net.output_activation = _ACT_NAME[output_code]
            net.weights = []
            net.biases = []
            for d_in, d_out in zip(dims[:-1], dims[1:]):
                w = np.frombuffer(fh.read(8 * d_in * d_out), dtype="<f8")
                net.weights.append(w.reshape(d_in, d_out).copy())
                b = np.frombuffer(fh.read(8 * d_out), dtype="<f8")
                net.biases.append(b.copy())
            nets[name] = net
    return nets
