"""Small numpy layer engine with hand-written backward passes.

Only the layers the modulation backbone needs are provided. Activations are
laid out channels-last, ``(batch, length, channels)``, for the convolutional
part and ``(batch, features)`` after flattening. Training runs in float32; calling
``astype(np.float64)`` on a layer switches it to the 64-bit mode used for
finite-difference gradient checks.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float32
NORM_EPS = 1e-8


class ShapeError(ValueError):
    """Raised when a layer receives an input of the wrong shape."""

    def __init__(self, layer: "Layer", expected, got):
        self.layer_index = layer.index
        self.kind = layer.kind
        self.expected = expected
        self.got = tuple(got)
        super().__init__(
            f"layer {layer.index} ({layer.kind}): expected input shape {expected}, got {self.got}"
        )


class CacheError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=DTYPE) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def unit_rows(rng: np.random.Generator, n: int, dim: int, dtype=DTYPE) -> np.ndarray:
    w = rng.standard_normal((n, dim))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    return w.astype(dtype)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.index = -1
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise CacheError(f"layer {self.index} ({self.kind}): backward called without a forward cache")
        cache, self._cache = self._cache, None
        return cache

    def zero_grad(self) -> None:
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def astype(self, dtype) -> "Layer":
        for name in self.params:
            self.params[name] = self.params[name].astype(dtype)
        self.zero_grad()
        return self

    def spec(self) -> dict:
        """Constructor arguments, enough to rebuild the layer without weights."""
        return {"kind": self.kind}


class Conv1d(Layer):
    kind = "conv1d"

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator | None = None,
                 kernel: int = 3, padding: int = 1, dtype=DTYPE):
        super().__init__()
        if kernel != 3 or padding != 1:
            raise ValueError("conv1d supports kernel=3, padding=1 only")
        self.c_in, self.c_out, self.kernel, self.padding = c_in, c_out, kernel, padding
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = he_uniform(rng, (c_out, c_in, kernel), c_in * kernel, dtype)
        self.params["bias"] = np.zeros(c_out, dtype=dtype)
        self.zero_grad()

    def forward(self, x, train=True):
        if x.ndim != 3 or x.shape[2] != self.c_in:
            raise ShapeError(self, ("B", "L", self.c_in), x.shape)
        b, length, _ = x.shape
        k = self.kernel
        xp = np.zeros((b, length + 2 * self.padding, self.c_in), dtype=x.dtype)
        xp[:, self.padding:self.padding + length] = x
        # one matmul against all kernel taps, then sum the shifted tap outputs
        wcat = self.params["weight"].transpose(1, 2, 0).reshape(self.c_in, k * self.c_out)
        taps = (xp.reshape(-1, self.c_in) @ wcat).reshape(b, length + 2 * self.padding, k, self.c_out)
        out = taps[:, 0:length, 0] + self.params["bias"]
        for j in range(1, k):
            out += taps[:, j:j + length, j]
        if train:
            self._cache = xp
        return out

    def backward(self, dout):
        return self._backward(dout, True)

    def backward_params_only(self, dout) -> None:
        self._backward(dout, False)

    def _backward(self, dout, input_grad):
        xp = self._take_cache()
        b, padded, _ = xp.shape
        k = self.kernel
        length = padded - 2 * self.padding
        dtaps = np.zeros((b, padded, k, self.c_out), dtype=dout.dtype)
        for j in range(k):
            dtaps[:, j:j + length, j] = dout
        dtaps = dtaps.reshape(-1, k * self.c_out)
        dwcat = xp.reshape(-1, self.c_in).T @ dtaps
        self.grads["weight"] += dwcat.reshape(self.c_in, k, self.c_out).transpose(2, 0, 1)
        self.grads["bias"] += dout.sum(axis=(0, 1))
        if not input_grad:
            return None
        wcat = self.params["weight"].transpose(1, 2, 0).reshape(self.c_in, k * self.c_out)
        dxp = (dtaps @ wcat.T).reshape(b, padded, self.c_in)
        return dxp[:, self.padding:self.padding + length]

    def spec(self):
        return {"kind": self.kind, "c_in": self.c_in, "c_out": self.c_out}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=True):
        mask = x > 0
        if train:
            self._cache = mask
        return np.maximum(x, 0)

    def backward(self, dout):
        return dout * self._take_cache()


class MaxPool1d(Layer):
    """Non-overlapping max pooling along the length axis of ``(B, L, C)`` input."""

    kind = "maxpool1d"

    def __init__(self, stride: int = 2):
        super().__init__()
        if stride != 2:
            raise ValueError("maxpool1d supports stride 2 only")
        self.stride = stride

    def forward(self, x, train=True):
        if x.ndim != 3 or x.shape[1] % self.stride:
            raise ShapeError(self, ("B", f"multiple of {self.stride}", "C"), x.shape)
        even, odd = x[:, 0::2], x[:, 1::2]
        # ties route to the first position of the window
        first = even >= odd
        if train:
            self._cache = (first, x.shape)
        return np.maximum(even, odd)

    def backward(self, dout):
        first, shape = self._take_cache()
        dx = np.empty(shape, dtype=dout.dtype)
        routed = dout * first
        dx[:, 0::2] = routed
        dx[:, 1::2] = dout - routed
        return dx

    def spec(self):
        return {"kind": self.kind, "stride": self.stride}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=True):
        if train:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._take_cache())


class Linear(Layer):
    kind = "linear"

    def __init__(self, f_in: int, f_out: int, rng: np.random.Generator | None = None,
                 dtype=DTYPE, zero: bool = False, column_stable: bool = False):
        super().__init__()
        self.f_in, self.f_out = f_in, f_out
        self.column_stable = column_stable
        if zero:
            w = np.zeros((f_out, f_in), dtype=dtype)
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            w = he_uniform(rng, (f_out, f_in), f_in, dtype)
        self.params["weight"] = w
        self.params["bias"] = np.zeros(f_out, dtype=dtype)
        self.zero_grad()

    def forward(self, x, train=True):
        if x.ndim != 2 or x.shape[1] != self.f_in:
            raise ShapeError(self, ("B", self.f_in), x.shape)
        if train:
            self._cache = x
        w = self.params["weight"]
        return (row_dots(x, w) if self.column_stable else x @ w.T) + self.params["bias"]

    def backward(self, dout):
        x = self._take_cache()
        self.grads["weight"] += dout.T @ x
        self.grads["bias"] += dout.sum(axis=0)
        return dout @ self.params["weight"]

    def grow(self, k_new: int, rng: np.random.Generator) -> None:
        """Append ``k_new`` zero rows; existing rows are left untouched."""
        w, b = self.params["weight"], self.params["bias"]
        self.params["weight"] = np.concatenate([w, np.zeros((k_new, self.f_in), dtype=w.dtype)])
        self.params["bias"] = np.concatenate([b, np.zeros(k_new, dtype=b.dtype)])
        self.f_out += k_new
        self.zero_grad()

    def spec(self):
        return {"kind": self.kind, "f_in": self.f_in, "f_out": self.f_out, "column_stable": self.column_stable}


def row_dots(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b.T`` computed so each entry depends only on its own two rows.

    A BLAS product may change its blocking, and so its rounding, when ``b``
    gains rows. Growing heads use this to keep old logits bit-identical.
    """
    return (a[:, None, :] * b[None, :, :]).sum(axis=-1)


def normalize_rows(v: np.ndarray):
    norm = np.sqrt((v * v).sum(axis=-1, keepdims=True) + NORM_EPS)
    return v / norm, norm


def normalize_rows_backward(dy: np.ndarray, y: np.ndarray, norm: np.ndarray) -> np.ndarray:
    return (dy - y * (y * dy).sum(axis=-1, keepdims=True)) / norm


def cosine_logits(feature: np.ndarray, weights: np.ndarray, scale: float) -> np.ndarray:
    """Scaled cosine similarity between each feature row and each weight row."""
    fn, _ = normalize_rows(np.atleast_2d(feature))
    wn, _ = normalize_rows(weights)
    out = scale * row_dots(fn, wn)
    return out[0] if np.ndim(feature) == 1 else out


class CosineLinear(Layer):
    """Bias-free head whose logits are ``scale * cos(feature, weight_row)``.

    ``last_cosines`` holds the unscaled cosines of the latest training forward
    pass, and :meth:`backward` accepts an extra gradient with respect to them so
    that losses defined on raw cosines (margin ranking) can be chained without
    going through the scale.
    """

    kind = "cosine_linear"

    def __init__(self, f_in: int, f_out: int, rng: np.random.Generator | None = None,
                 scale: float = 10.0, dtype=DTYPE):
        super().__init__()
        if scale <= 0:
            raise ValueError("cosine scale must be positive")
        self.f_in, self.f_out = f_in, f_out
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = unit_rows(rng, f_out, f_in, dtype)
        self.params["scale"] = np.array([scale], dtype=dtype)
        self.last_cosines = None
        self.zero_grad()

    @property
    def scale(self) -> float:
        return float(self.params["scale"][0])

    def forward(self, x, train=True):
        if x.ndim != 2 or x.shape[1] != self.f_in:
            raise ShapeError(self, ("B", self.f_in), x.shape)
        xn, xnorm = normalize_rows(x)
        wn, wnorm = normalize_rows(self.params["weight"])
        cos = row_dots(xn, wn)
        if train:
            self._cache = (xn, xnorm, wn, wnorm, cos)
            self.last_cosines = cos
        return self.params["scale"][0] * cos

    def backward(self, dout, dcos_extra=None):
        xn, xnorm, wn, wnorm, cos = self._take_cache()
        scale = self.params["scale"][0]
        self.grads["scale"] += np.array([(dout * cos).sum()], dtype=self.grads["scale"].dtype)
        dcos = scale * dout
        if dcos_extra is not None:
            dcos = dcos + dcos_extra
        dxn = dcos @ wn
        dwn = dcos.T @ xn
        self.grads["weight"] += normalize_rows_backward(dwn, wn, wnorm)
        return normalize_rows_backward(dxn, xn, xnorm)

    def grow(self, k_new: int, rng: np.random.Generator) -> None:
        w = self.params["weight"]
        self.params["weight"] = np.concatenate([w, unit_rows(rng, k_new, self.f_in, w.dtype)])
        self.f_out += k_new
        self.zero_grad()

    def check_rows(self) -> None:
        norms = np.linalg.norm(self.params["weight"], axis=1)
        if np.any(norms == 0):
            raise ValueError(f"cosine head has zero-norm weight rows: {np.flatnonzero(norms == 0).tolist()}")

    def spec(self):
        return {"kind": self.kind, "f_in": self.f_in, "f_out": self.f_out}


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross entropy over the batch and its gradient w.r.t. the logits.

    A 1-D ``logits`` vector with a scalar label is treated as a batch of one,
    in which case the gradient is exactly ``softmax(logits) - onehot(label)``.
    """
    single = np.ndim(logits) == 1
    z = np.atleast_2d(logits)
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = z.shape
    if c < 2 and single:
        raise ValueError("softmax_cross_entropy needs at least two classes")
    if y.shape[0] != n:
        raise ShapeError(_LossStub("cross_entropy"), (n,), y.shape)
    if np.any(y < 0) or np.any(y >= c):
        raise ValueError(f"label out of range for {c} classes: {y[(y < 0) | (y >= c)].tolist()}")
    logp = log_softmax(z)
    rows = np.arange(n)
    loss = float(-logp[rows, y].mean())
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    grad /= n
    return loss, (grad[0] if single else grad)


def kd_loss(student: np.ndarray, teacher: np.ndarray, temperature: float = 2.0) -> tuple[float, np.ndarray]:
    """Temperature-softened KL(teacher || student) times T**2, batch-averaged."""
    if np.shape(student) != np.shape(teacher):
        raise ShapeError(_LossStub("kd"), np.shape(teacher), np.shape(student))
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    single = np.ndim(student) == 1
    s = np.atleast_2d(student)
    t = np.atleast_2d(teacher)
    n = s.shape[0]
    if s.shape[1] == 0:
        return 0.0, np.zeros_like(student)
    log_pt = log_softmax(t / temperature)
    log_ps = log_softmax(s / temperature)
    pt = np.exp(log_pt)
    loss = float((pt * (log_pt - log_ps)).sum(axis=1).mean() * temperature ** 2)
    grad = temperature * (np.exp(log_ps) - pt) / n
    return loss, (grad[0] if single else grad.astype(s.dtype, copy=False))


class _LossStub:
    index = -1

    def __init__(self, kind):
        self.kind = kind


class SGD:
    """Momentum SGD: ``v = mu*v + g + wd*theta; theta -= lr*v``.

    With ``clip_norm`` set, the raw gradients are first rescaled so their
    global L2 norm is at most ``clip_norm``.
    """

    def __init__(self, layers, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
                 clip_norm: float | None = None):
        self.layers = list(layers)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.velocity: dict[tuple[int, str], np.ndarray] = {}

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                                 for layer in self.layers for g in layer.grads.values())))

    def step(self) -> None:
        for i, layer in enumerate(self.layers):
            for name, g in layer.grads.items():
                if not np.all(np.isfinite(g)):
                    raise NonFiniteError(
                        f"non-finite gradient in layer {layer.index} ({layer.kind}) parameter '{name}'"
                    )
        shrink = 1.0
        if self.clip_norm:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                shrink = self.clip_norm / norm
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                g = layer.grads[name]
                if shrink != 1.0:
                    g = g * g.dtype.type(shrink)
                if self.weight_decay and name != "scale":
                    g = g + self.weight_decay * p
                key = (i, name)
                v = self.velocity.get(key)
                if v is None or v.shape != p.shape:
                    v = np.zeros_like(p)
                v = self.momentum * v + g
                self.velocity[key] = v
                p -= (self.lr * v).astype(p.dtype, copy=False)
        if any(isinstance(layer, CosineLinear) for layer in self.layers):
            for layer in self.layers:
                if isinstance(layer, CosineLinear):
                    np.maximum(layer.params["scale"], 1e-3, out=layer.params["scale"])

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()


def build_layer(spec: dict, rng: np.random.Generator | None = None, dtype=DTYPE) -> Layer:
    kind = spec["kind"]
    if kind == "conv1d":
        return Conv1d(spec["c_in"], spec["c_out"], rng, dtype=dtype)
    if kind == "relu":
        return ReLU()
    if kind == "maxpool1d":
        return MaxPool1d(spec.get("stride", 2))
    if kind == "flatten":
        return Flatten()
    if kind == "linear":
        return Linear(spec["f_in"], spec["f_out"], rng, dtype=dtype,
                      column_stable=spec.get("column_stable", False))
    if kind == "cosine_linear":
        return CosineLinear(spec["f_in"], spec["f_out"], rng, dtype=dtype)
    raise ValueError(f"unknown layer kind: {kind}")
