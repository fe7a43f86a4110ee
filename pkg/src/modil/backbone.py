"""Convolutional feature extractor with a head that grows as classes arrive.

The layer plan (four conv/ReLU/pool blocks, then a dense feature layer) is a
stand-in sized for desk-scale runs, not a reconstruction of a published
architecture.
"""

from __future__ import annotations

import copy
import json
import struct
from pathlib import Path

import numpy as np

from .numerics import (DTYPE, Conv1d, CosineLinear, Flatten, Layer, Linear, MaxPool1d, ReLU,
                       ShapeError, build_layer)

CHANNELS = (2, 32, 48, 64, 64)
CKPT_MAGIC = b"MODILCKPT"
CKPT_VERSION = 1


class Backbone:
    """Feature extractor plus a linear or cosine head over the seen classes.

    Frames enter as ``(B, 2, L)`` arrays. ``forward`` returns logits and keeps
    the penultimate activations in ``last_features`` for losses that need them.
    """

    def __init__(self, layers: list[Layer], head: Layer, length: int, feature_dim: int,
                 head_kind: str, channels=CHANNELS, seed: int = 0):
        self.layers = layers
        self.head = head
        self.length = length
        self.feature_dim = feature_dim
        self.head_kind = head_kind
        self.channels = tuple(channels)
        self.seed = seed
        self.frozen = False
        self.last_features = None
        for i, layer in enumerate(self.all_layers):
            layer.index = i
        # the first conv never needs an input gradient during training
        self._skip_input_grad = True

    @property
    def all_layers(self) -> list[Layer]:
        return [*self.layers, self.head]

    @property
    def n_classes(self) -> int:
        return self.head.f_out

    @property
    def dtype(self):
        return self.head.params["weight"].dtype

    def _prepare(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1] != self.channels[0] or x.shape[2] != self.length:
            raise ShapeError(self.layers[0], ("B", self.channels[0], self.length), x.shape)
        return np.ascontiguousarray(x.transpose(0, 2, 1), dtype=self.dtype)

    def features(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        h = self._prepare(x)
        for layer in self.layers:
            h = layer.forward(h, train)
        return h

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if train and self.frozen:
            raise RuntimeError("frozen model cannot run a training pass")
        feats = self.features(x, train)
        self.last_features = feats
        return self.head.forward(feats, train)

    def predict_logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.n_classes), self.dtype)

    def extract(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self.features(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.feature_dim), self.dtype)

    def backward(self, dlogits: np.ndarray, dfeatures: np.ndarray | None = None,
                 dcosines: np.ndarray | None = None, input_grad: bool = False):
        if isinstance(self.head, CosineLinear):
            d = self.head.backward(dlogits, dcosines)
        else:
            d = self.head.backward(dlogits)
        if dfeatures is not None:
            d = d + dfeatures
        for i, layer in enumerate(reversed(self.layers)):
            if i == len(self.layers) - 1 and self._skip_input_grad and not input_grad:
                layer.backward_params_only(d) if hasattr(layer, "backward_params_only") else layer.backward(d)
                return None
            d = layer.backward(d)
        return d.transpose(0, 2, 1)

    def zero_grad(self) -> None:
        for layer in self.all_layers:
            layer.zero_grad()

    def expand_head(self, k_new: int) -> "Backbone":
        """Grow the head by ``k_new`` outputs in place; old rows are untouched."""
        if k_new < 1:
            raise ValueError("k_new must be >= 1")
        rng = np.random.default_rng([self.seed, 7919, self.n_classes])
        self.head.grow(k_new, rng)
        return self

    def clone_frozen(self) -> "Backbone":
        twin = copy.deepcopy(self)
        twin.frozen = True
        twin.last_features = None
        for layer in twin.all_layers:
            layer._cache = None
        return twin

    def astype(self, dtype) -> "Backbone":
        for layer in self.all_layers:
            layer.astype(dtype)
        return self

    def parameters(self):
        for layer in self.all_layers:
            for name in sorted(layer.params):
                yield layer, name, layer.params[name]

    def n_params(self) -> int:
        return sum(p.size for _, _, p in self.parameters())

    def descriptor(self) -> dict:
        return {
            "length": self.length,
            "feature_dim": self.feature_dim,
            "head_kind": self.head_kind,
            "channels": list(self.channels),
            "n_classes": self.n_classes,
            "seed": self.seed,
            "layers": [layer.spec() for layer in self.all_layers],
        }


def flatten_size(length: int, channels=CHANNELS) -> int:
    blocks = len(channels) - 1
    return channels[-1] * length // 2 ** blocks


def param_count(length: int, feature_dim: int, n_classes: int, head_kind: str = "linear",
                channels=CHANNELS) -> int:
    """Closed-form parameter count of :func:`build_backbone` output."""
    conv = sum((c_in * 3 + 1) * c_out for c_in, c_out in zip(channels[:-1], channels[1:]))
    dense = (flatten_size(length, channels) + 1) * feature_dim
    head = (feature_dim + 1) * n_classes if head_kind == "linear" else feature_dim * n_classes + 1
    return conv + dense + head


def build_backbone(length: int = 256, feature_dim: int = 128, head_kind: str = "linear",
                   seed: int = 0, channels=CHANNELS, cosine_scale: float = 10.0,
                   dtype=DTYPE) -> Backbone:
    blocks = len(channels) - 1
    if length % 2 ** blocks:
        raise ValueError(f"frame length {length} must be divisible by {2 ** blocks}")
    if head_kind not in ("linear", "cosine"):
        raise ValueError(f"unknown head kind {head_kind!r}")
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    for c_in, c_out in zip(channels[:-1], channels[1:]):
        layers += [Conv1d(c_in, c_out, rng, dtype=dtype), ReLU(), MaxPool1d(2)]
    layers += [Flatten(), Linear(flatten_size(length, channels), feature_dim, rng, dtype=dtype), ReLU()]
    if head_kind == "linear":
        head = Linear(feature_dim, 0, dtype=dtype, zero=True, column_stable=True)
    else:
        head = CosineLinear(feature_dim, 0, rng, scale=cosine_scale, dtype=dtype)
    return Backbone(layers, head, length, feature_dim, head_kind, channels, seed)


def save_checkpoint(model: Backbone, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def checkpoint_bytes(model: Backbone) -> bytes:
    desc = json.dumps(model.descriptor(), sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for _, _, p in model.parameters())
    return CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(desc)) + desc + blob


def load_checkpoint(path) -> Backbone:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_bytes(buf: bytes) -> Backbone:
    if buf[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError("bad magic: not a MODILCKPT checkpoint")
    pos = len(CKPT_MAGIC)
    version, n = struct.unpack_from("<BI", buf, pos)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos += 5
    desc = json.loads(buf[pos:pos + n].decode("utf-8"))
    pos += n
    specs = desc["layers"]
    layers = [build_layer(s) for s in specs[:-1]]
    head = build_layer(specs[-1])
    model = Backbone(layers, head, desc["length"], desc["feature_dim"], desc["head_kind"],
                     desc["channels"], desc["seed"])
    for _, name, p in model.parameters():
        count = p.size
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(p.shape)
        p[...] = arr
        pos += 4 * count
    if pos != len(buf):
        raise ValueError("checkpoint blob length does not match architecture")
    for layer in model.all_layers:
        layer.zero_grad()
    return model
