"""Layer primitives with hand-written backward passes.

Activations use the layout ``(batch, channels, d1, d2, d3)``; for scenario
tensors the three spatial axes are (rows, cols, time).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError


class ShapeError(ConfigError):
    pass


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ShapeError(f"expected three dimensions, got {v}")
    return v


# ---------------------------------------------------------------------------
# functional ops

def conv3d(x, w, b, stride=1):
    """Valid 3D cross-correlation.  x: (N, C, D1, D2, D3), w: (O, C, k1, k2, k3)."""
    s = _triple(stride)
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1] or any(
            k > d for k, d in zip(w.shape[2:], x.shape[2:])):
        raise ShapeError(f"conv3d: input {x.shape} incompatible with kernel {w.shape}")
    win = sliding_window_view(x, w.shape[2:], axis=(2, 3, 4))[:, :, ::s[0], ::s[1], ::s[2]]
    # win: (N, C, o1, o2, o3, k1, k2, k3)
    out = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))  # (N, o1, o2, o3, O)
    out = np.moveaxis(out, 4, 1)
    return out + b[None, :, None, None, None]


def conv3d_backward(dout, x, w, stride=1, need_dx=True):
    """Gradients of :func:`conv3d` w.r.t. input (None unless ``need_dx``),
    kernel and bias."""
    s = _triple(stride)
    k = w.shape[2:]
    win = sliding_window_view(x, k, axis=(2, 3, 4))[:, :, ::s[0], ::s[1], ::s[2]]
    dw = np.tensordot(dout, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))  # (O, C, k1, k2, k3)
    db = dout.sum(axis=(0, 2, 3, 4))
    if not need_dx:
        return None, dw, db
    dx = np.zeros_like(x)
    o = dout.shape[2:]
    for a in range(k[0]):
        for c in range(k[1]):
            for e in range(k[2]):
                contrib = np.tensordot(dout, w[:, :, a, c, e], axes=([1], [0]))  # (N, o1, o2, o3, C)
                dx[:, :, a:a + s[0] * o[0]:s[0], c:c + s[1] * o[1]:s[1], e:e + s[2] * o[2]:s[2]] += \
                    np.moveaxis(contrib, 4, 1)
    return dx, dw, db


def maxpool3d(x, window):
    """Non-overlapping 3D max pooling."""
    k = _triple(window)
    n, c, *d = x.shape
    if any(di % ki for di, ki in zip(d, k)):
        raise ShapeError(f"maxpool3d: window {k} does not divide input {tuple(d)}")
    o = [di // ki for di, ki in zip(d, k)]
    return x.reshape(n, c, o[0], k[0], o[1], k[1], o[2], k[2]).max(axis=(3, 5, 7))


def maxpool3d_backward(dout, x, out, window):
    """Route each window's gradient to its first maximum (row-major order)."""
    k = _triple(window)
    dx = np.zeros_like(x)
    taken = np.zeros(out.shape, dtype=bool)
    for a in range(k[0]):
        for c in range(k[1]):
            for e in range(k[2]):
                sl = (slice(None), slice(None), slice(a, None, k[0]), slice(c, None, k[1]),
                      slice(e, None, k[2]))
                hit = (x[sl] == out) & ~taken
                dx[sl] = np.where(hit, dout, 0)
                taken |= hit
    return dx


def dense(x, w, b):
    """Affine map; ``w`` has shape (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {w.shape}, bias {b.shape}")
    return x @ w.T + b


def dense_backward(dout, x, w):
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dprobs, probs):
    return probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# layer specs

@dataclass
class Layer:
    """One entry of the fixed layer vocabulary.

    ``params`` lists parameter suffixes; the network stores each as
    ``"<name>.<suffix>"``.
    """

    name: str
    kind: str = "layer"
    trainable: bool = True
    params: tuple[str, ...] = ()

    def output_shape(self, in_shape):
        return in_shape

    def init(self, in_shape, rng, dtype):
        return {}

    def forward(self, p, x):
        raise NotImplementedError

    def backward(self, p, cache, dout, need_dx=True):
        raise NotImplementedError

    def config(self) -> dict:
        return {}


@dataclass
class Conv3D(Layer):
    out_channels: int = 8
    kernel: tuple = (3, 3, 2)
    stride: tuple = (1, 1, 1)
    kind: str = "conv3d"
    params: tuple = ("w", "b")

    def output_shape(self, in_shape):
        c, *d = in_shape
        k, s = _triple(self.kernel), _triple(self.stride)
        if any(ki > di for ki, di in zip(k, d)):
            raise ShapeError(f"{self.name}: kernel {k} larger than input {tuple(d)}")
        return (self.out_channels, *[(di - ki) // si + 1 for di, ki, si in zip(d, k, s)])

    def init(self, in_shape, rng, dtype):
        k = _triple(self.kernel)
        fan_in = in_shape[0] * k[0] * k[1] * k[2]
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(self.out_channels, in_shape[0], *k))
        return {"w": w.astype(dtype), "b": np.zeros(self.out_channels, dtype=dtype)}

    def forward(self, p, x):
        return conv3d(x, p["w"], p["b"], self.stride), x

    def backward(self, p, cache, dout, need_dx=True):
        dx, dw, db = conv3d_backward(dout, cache, p["w"], self.stride, need_dx)
        return dx, {"w": dw, "b": db}

    def config(self):
        return {"out_channels": self.out_channels, "kernel": list(_triple(self.kernel)),
                "stride": list(_triple(self.stride))}


@dataclass
class MaxPool3D(Layer):
    window: tuple = (2, 2, 1)
    kind: str = "maxpool3d"

    def output_shape(self, in_shape):
        c, *d = in_shape
        k = _triple(self.window)
        if any(di % ki for di, ki in zip(d, k)):
            raise ShapeError(f"{self.name}: window {k} does not divide input {tuple(d)}")
        return (c, *[di // ki for di, ki in zip(d, k)])

    def forward(self, p, x):
        out = maxpool3d(x, self.window)
        return out, (x, out)

    def backward(self, p, cache, dout, need_dx=True):
        return maxpool3d_backward(dout, *cache, self.window), {}

    def config(self):
        return {"window": list(_triple(self.window))}


@dataclass
class ReLU(Layer):
    kind: str = "relu"

    def forward(self, p, x):
        return np.maximum(x, 0), x > 0

    def backward(self, p, cache, dout, need_dx=True):
        return dout * cache, {}


@dataclass
class Flatten(Layer):
    kind: str = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, p, x):
        return x.reshape(len(x), -1), x.shape

    def backward(self, p, cache, dout, need_dx=True):
        return dout.reshape(cache), {}


@dataclass
class Dense(Layer):
    units: int = 64
    kind: str = "dense"
    params: tuple = ("w", "b")

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"{self.name}: dense needs a flat input, got {in_shape}")
        return (self.units,)

    def init(self, in_shape, rng, dtype):
        bound = 1.0 / np.sqrt(in_shape[0])
        w = rng.uniform(-bound, bound, size=(self.units, in_shape[0]))
        return {"w": w.astype(dtype), "b": np.zeros(self.units, dtype=dtype)}

    def forward(self, p, x):
        return dense(x, p["w"], p["b"]), x

    def backward(self, p, cache, dout, need_dx=True):
        dx, dw, db = dense_backward(dout, cache, p["w"])
        return dx, {"w": dw, "b": db}

    def config(self):
        return {"units": self.units}


LAYER_KINDS = {"conv3d": Conv3D, "maxpool3d": MaxPool3D, "relu": ReLU,
               "flatten": Flatten, "dense": Dense}


def layer_from_config(kind: str, name: str, cfg: dict) -> Layer:
    try:
        cls = LAYER_KINDS[kind]
    except KeyError:
        raise ConfigError(f"unknown layer kind {kind!r}") from None
    cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()}
    return cls(name=name, **cfg)
