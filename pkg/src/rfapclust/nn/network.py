"""Feature extractor ``f`` with named softmax heads on top of its output."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DataError
from .layers import (Conv3D, Dense, Flatten, Layer, MaxPool3D, ReLU, ShapeError,
                     dense, dense_backward, layer_from_config, softmax, softmax_backward)


def to_network_input(tensors: np.ndarray) -> np.ndarray:
    """(N, T, rows, cols) scenario batch -> (N, 1, rows, cols, T)."""
    tensors = np.asarray(tensors)
    if tensors.ndim == 5:
        return tensors
    if tensors.ndim != 4:
        raise ShapeError(f"expected a batch of scenario tensors, got shape {tensors.shape}")
    return np.ascontiguousarray(tensors.transpose(0, 2, 3, 1)[:, None])


def default_backbone(grid_shape, feature_dim: int = 64) -> list[Layer]:
    """Two conv blocks and a dense layer for an (T, rows, cols) grid.

    The second kernel is 3 or 2 per axis, whichever makes the following
    2x2x2 pooling divide evenly.
    """
    t, rows, cols = grid_shape
    d1 = [rows - 2, cols - 2, t - 1]
    if d1[0] % 2 or d1[1] % 2 or min(d1) < 1:
        raise ShapeError(f"grid {grid_shape} incompatible with the first conv block")
    d1 = [d1[0] // 2, d1[1] // 2, d1[2]]
    k2 = tuple(3 if (d - 2) % 2 == 0 and d >= 4 else 2 for d in d1)
    if any(d - k + 1 < 2 or (d - k + 1) % 2 for d, k in zip(d1, k2)):
        raise ShapeError(f"grid {grid_shape} too small for the second conv block")
    return [
        Conv3D("conv1", out_channels=8, kernel=(3, 3, 2)),
        ReLU("relu1"),
        MaxPool3D("pool1", window=(2, 2, 1)),
        Conv3D("conv2", out_channels=16, kernel=k2),
        ReLU("relu2"),
        MaxPool3D("pool2", window=(2, 2, 2)),
        Flatten("flatten"),
        Dense("fc", units=feature_dim),
        ReLU("relu3"),
    ]


@dataclass
class Pass:
    """Everything a forward pass keeps for its backward pass."""

    features: np.ndarray
    probs: dict = field(default_factory=dict)
    caches: list = field(default_factory=list)


class Network:
    """Backbone ``f: grid -> R^F`` plus dense+softmax heads.

    Parameters live in ``params`` under ``"<layer>.<w|b>"`` and
    ``"head.<name>.<w|b>"``.  Names in ``frozen`` are never updated.
    """

    def __init__(self, input_shape, layers: list[Layer], seed: int = 0, dtype=np.float64):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.layers = list(layers)
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        self.heads: dict[str, int] = {}
        self.frozen: set[str] = set()
        shape = self.input_shape
        for layer in self.layers:
            for k, v in layer.init(shape, self.rng, self.dtype).items():
                self.params[f"{layer.name}.{k}"] = v
            shape = layer.output_shape(shape)
        if len(shape) != 1:
            raise ShapeError(f"backbone must end flat, ends with {shape}")
        self.feature_dim = shape[0]

    @classmethod
    def for_grid(cls, grid_shape, feature_dim=64, seed=0, dtype=np.float64):
        t, rows, cols = grid_shape
        return cls((1, rows, cols, t), default_backbone(grid_shape, feature_dim), seed, dtype)

    # -- heads -------------------------------------------------------------
    def add_head(self, name: str, n_out: int):
        if n_out < 1:
            raise ConfigError("a head needs at least one output")
        layer = Dense(f"head.{name}", units=n_out)
        for k, v in layer.init((self.feature_dim,), self.rng, self.dtype).items():
            self.params[f"head.{name}.{k}"] = v
        self.heads[name] = n_out

    def remove_head(self, name: str):
        self.heads.pop(name)
        for k in ("w", "b"):
            self.params.pop(f"head.{name}.{k}")
            self.frozen.discard(f"head.{name}.{k}")

    def extend_head(self, name: str, extra: int):
        """Append ``extra`` freshly initialised outputs to an existing head."""
        fresh = Dense("tmp", units=extra).init((self.feature_dim,), self.rng, self.dtype)
        w, b = self.params[f"head.{name}.w"], self.params[f"head.{name}.b"]
        self.params[f"head.{name}.w"] = np.concatenate([w, fresh["w"]])
        self.params[f"head.{name}.b"] = np.concatenate([b, fresh["b"]])
        self.heads[name] += extra

    # -- freezing ----------------------------------------------------------
    def set_frozen(self, n_layers: int):
        """Freeze the first ``n_layers`` backbone layers; unfreeze the rest."""
        if not 0 <= n_layers <= len(self.layers):
            raise ConfigError(f"cannot freeze {n_layers} of {len(self.layers)} layers")
        self.frozen = set()
        for i, layer in enumerate(self.layers):
            layer.trainable = i >= n_layers
            if not layer.trainable:
                self.frozen.update(f"{layer.name}.{p}" for p in layer.params)
        return self

    def layer_index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise ConfigError(f"no layer named {name!r}")

    def trainable_names(self) -> list[str]:
        return [k for k in self.params if k not in self.frozen]

    # -- passes ------------------------------------------------------------
    def forward(self, x, heads=None) -> Pass:
        x = to_network_input(x).astype(self.dtype, copy=False)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"input {x.shape[1:]} does not match network input {self.input_shape}")
        caches = []
        for layer in self.layers:
            p = {k: self.params[f"{layer.name}.{k}"] for k in layer.params}
            x, cache = layer.forward(p, x)
            caches.append(cache)
        out = Pass(features=x, caches=caches)
        for name in (self.heads if heads is None else heads):
            out.probs[name] = softmax(dense(x, self.params[f"head.{name}.w"],
                                            self.params[f"head.{name}.b"]))
        return out

    def backward(self, fwd: Pass, dprobs: dict, dfeatures=None, grads=None) -> dict:
        """Accumulate parameter gradients of a scalar loss into ``grads``.

        ``dprobs`` maps head names to dLoss/dprobabilities.  Frozen
        parameters receive no entry.
        """
        grads = {} if grads is None else grads
        h = fwd.features
        dh = np.zeros_like(h) if dfeatures is None else np.array(dfeatures, dtype=h.dtype)
        for name, dp in dprobs.items():
            dz = softmax_backward(dp, fwd.probs[name])
            dx, dw, db = dense_backward(dz, h, self.params[f"head.{name}.w"])
            dh += dx
            self._accumulate(grads, f"head.{name}.w", dw)
            self._accumulate(grads, f"head.{name}.b", db)
        live = [any(f"{l.name}.{p}" not in self.frozen for p in l.params) for l in self.layers]
        lowest = next((i for i, v in enumerate(live) if v), len(self.layers))
        dx = dh
        for i in range(len(self.layers) - 1, lowest - 1, -1):
            layer = self.layers[i]
            p = {k: self.params[f"{layer.name}.{k}"] for k in layer.params}
            dx, pg = layer.backward(p, fwd.caches[i], dx, need_dx=i > lowest)
            for k, v in pg.items():
                self._accumulate(grads, f"{layer.name}.{k}", v)
        return grads

    def _accumulate(self, grads, name, value):
        if name in self.frozen:
            return
        if name in grads:
            grads[name] = grads[name] + value
        else:
            grads[name] = value

    def features(self, x, batch_size: int = 256) -> np.ndarray:
        """Row-ordered features for a batch of scenario tensors."""
        x = np.asarray(x)
        if len(x) == 0:
            return np.zeros((0, self.feature_dim), dtype=self.dtype)
        return np.concatenate([self.forward(x[i:i + batch_size], heads=()).features
                               for i in range(0, len(x), batch_size)])

    def predict(self, x, head: str, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x)
        if len(x) == 0:
            return np.zeros((0, self.heads[head]), dtype=self.dtype)
        return np.concatenate([self.forward(x[i:i + batch_size], heads=(head,)).probs[head]
                               for i in range(0, len(x), batch_size)])

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Network":
        net = self.copy()
        net.dtype = np.dtype(dtype)
        net.params = {k: v.astype(dtype) for k, v in net.params.items()}
        return net

    # -- persistence -------------------------------------------------------
    def save(self, stem, extra: dict | None = None) -> tuple[Path, Path]:
        """JSON manifest plus little-endian float64 parameter blob in
        manifest order."""
        stem = Path(stem)
        blob, manifest = stem.with_suffix(".params"), stem.with_suffix(".json")
        names = list(self.params)
        data = b"".join(self.params[n].astype("<f8").tobytes(order="C") for n in names)
        blob.write_bytes(data)
        meta = {
            "input_shape": list(self.input_shape),
            "layers": [{"kind": l.kind, "name": l.name, "trainable": l.trainable, **l.config()}
                       for l in self.layers],
            "heads": self.heads,
            "params": [{"name": n, "shape": list(self.params[n].shape)} for n in names],
            "frozen": sorted(self.frozen),
            "rng_state": self.rng.bit_generator.state,
            "blob": blob.name,
            "blob_sha256": hashlib.sha256(data).hexdigest(),
            **(extra or {}),
        }
        manifest.write_text(json.dumps(meta, indent=1, sort_keys=True))
        return blob, manifest

    @classmethod
    def load(cls, stem, dtype=np.float64) -> "Network":
        manifest = Path(stem).with_suffix(".json")
        if not manifest.exists():
            raise DataError(f"checkpoint {manifest} not found")
        meta = json.loads(manifest.read_text())
        layers = []
        for spec in meta["layers"]:
            spec = dict(spec)
            kind, name, trainable = spec.pop("kind"), spec.pop("name"), spec.pop("trainable")
            layer = layer_from_config(kind, name, spec)
            layer.trainable = trainable
            layers.append(layer)
        net = cls.__new__(cls)
        net.input_shape = tuple(meta["input_shape"])
        net.layers = layers
        net.dtype = np.dtype(dtype)
        net.rng = np.random.default_rng()
        net.rng.bit_generator.state = meta["rng_state"]
        net.heads = {k: int(v) for k, v in meta["heads"].items()}
        net.frozen = set(meta["frozen"])
        raw = np.frombuffer((manifest.parent / meta["blob"]).read_bytes(), dtype="<f8")
        net.params, offset = {}, 0
        for entry in meta["params"]:
            size = int(np.prod(entry["shape"]))
            if offset + size > raw.size:
                raise DataError(f"checkpoint blob too short for {entry['name']}")
            net.params[entry["name"]] = raw[offset:offset + size].reshape(entry["shape"]).astype(dtype)
            offset += size
        shape = net.input_shape
        for layer in layers:
            shape = layer.output_shape(shape)
        net.feature_dim = shape[0]
        return net
