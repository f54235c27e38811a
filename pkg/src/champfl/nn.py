"""Small numpy network engine: forward/backward, SGD and flat parameter vectors.

Every model is a flat float64 parameter vector plus a :class:`ModelSpec`. Layers
read their weights as views into that vector, so flattening is free and the
coordinate order is fixed by the layer list.
"""

from __future__ import annotations

import functools
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError, NumericError

ARCHITECTURES = ("logistic", "mlp", "fmnist_cnn", "cifar_alexnet")

CHECKPOINT_MAGIC = b"CHMP"
CHECKPOINT_VERSION = 1


# --------------------------------------------------------------------------- layers


class Dense:
    def __init__(self, n_in: int, n_out: int):
        self.n_in, self.n_out = n_in, n_out
        self.shapes = [(n_out, n_in), (n_out,)]
        self.fan_in = n_in

    def out_shape(self, in_shape):
        return (self.n_out,)

    def forward(self, x, params):
        w, b = params
        return x @ w.T + b, x

    def backward(self, dy, cache, params, grads):
        x = cache
        w, _ = params
        grads[0][...] = dy.T @ x
        grads[1][...] = dy.sum(axis=0)
        return dy @ w


class Conv2d:
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, pad: int = 0):
        self.c_in, self.c_out = c_in, c_out
        self.k, self.stride, self.pad = kernel, stride, pad
        self.shapes = [(c_out, c_in, kernel, kernel), (c_out,)]
        self.fan_in = c_in * kernel * kernel

    def out_shape(self, in_shape):
        _, h, w = in_shape
        ho = (h + 2 * self.pad - self.k) // self.stride + 1
        wo = (w + 2 * self.pad - self.k) // self.stride + 1
        return (self.c_out, ho, wo)

    def _window(self, i, j, ho, wo):
        s = self.stride
        return (slice(None), slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))

    def forward(self, x, params):
        w, b = params
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        _, ho, wo = self.out_shape(x.shape[1:])
        out = np.zeros((x.shape[0], ho, wo, self.c_out))
        # accumulate one kernel tap at a time; avoids materialising im2col
        for i in range(self.k):
            for j in range(self.k):
                patch = xp[self._window(i, j, ho, wo)]
                out += np.tensordot(patch, w[:, :, i, j], axes=([1], [1]))
        out += b
        return out.transpose(0, 3, 1, 2), (xp, x.shape)

    def backward(self, dy, cache, params, grads):
        xp, x_shape = cache
        w, _ = params
        ho, wo = dy.shape[2:]
        dxp = np.zeros_like(xp)
        for i in range(self.k):
            for j in range(self.k):
                win = self._window(i, j, ho, wo)
                grads[0][:, :, i, j] = np.tensordot(dy, xp[win], axes=([0, 2, 3], [0, 2, 3]))
                dxp[win] += np.tensordot(dy, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        grads[1][...] = dy.sum(axis=(0, 2, 3))
        p = self.pad
        if p:
            return dxp[:, :, p : p + x_shape[2], p : p + x_shape[3]]
        return dxp


class ReLU:
    shapes: list = []

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, params):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache, params, grads):
        return dy * cache


class MaxPool2:
    """2x2 max pooling with stride 2; odd trailing rows/cols are dropped."""

    shapes: list = []

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (c, h // 2, w // 2)

    def forward(self, x, params):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        blocks = (
            x[:, :, : 2 * h2, : 2 * w2]
            .reshape(n, c, h2, 2, w2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h2, w2, 4)
        )
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return out, (arg, x.shape)

    def backward(self, dy, cache, params, grads):
        arg, x_shape = cache
        n, c, h, w = x_shape
        h2, w2 = h // 2, w // 2
        blocks = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(blocks, arg[..., None], dy[..., None], axis=-1)
        dx = np.zeros(x_shape)
        dx[:, :, : 2 * h2, : 2 * w2] = (
            blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        )
        return dx


class Flatten:
    shapes: list = []

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, params):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, params, grads):
        return dy.reshape(cache)


# --------------------------------------------------------------------------- specs


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; fully determines the parameter count K.

    ``width`` scales the channel counts and hidden units of the two CNNs so the
    gradient checks can run on narrow copies of the same topology.
    """

    architecture: str
    input_shape: tuple[int, int, int]
    classes: int = 10
    hidden: tuple[int, ...] = ()
    width: float = 1.0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise InputError(f"unknown architecture {self.architecture!r}")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        if len(self.input_shape) != 3:
            raise InputError("input_shape must be (channels, height, width)")
        if self.classes < 2:
            raise InputError("need at least two classes")

    @property
    def num_params(self) -> int:
        return _network(self).size

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """(layer name, output shape) for every layer, input first."""
        net = _network(self)
        shape = self.input_shape
        rows = [("input", shape)]
        for layer in net.layers:
            shape = layer.out_shape(shape)
            rows.append((type(layer).__name__, shape))
        return rows

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            architecture=d["architecture"],
            input_shape=tuple(d["input_shape"]),
            classes=d.get("classes", 10),
            hidden=tuple(d.get("hidden", ())),
            width=d.get("width", 1.0),
        )


def _scaled(n: int, width: float) -> int:
    return max(1, int(round(n * width)))


def _build_layers(spec: ModelSpec) -> list:
    c, h, w = spec.input_shape
    arch = spec.architecture
    if arch == "logistic":
        return [Flatten(), Dense(c * h * w, spec.classes)]
    if arch == "mlp":
        layers: list = [Flatten()]
        n_in = c * h * w
        for units in spec.hidden:
            layers += [Dense(n_in, units), ReLU()]
            n_in = units
        layers.append(Dense(n_in, spec.classes))
        return layers
    if arch == "fmnist_cnn":
        c1, c2, fc = _scaled(30, spec.width), _scaled(50, spec.width), _scaled(100, spec.width)
        flat = c2 * (h // 4) * (w // 4)
        return [
            Conv2d(c, c1, 3, pad=1), ReLU(), MaxPool2(),
            Conv2d(c1, c2, 3, pad=1), ReLU(), MaxPool2(),
            Flatten(), Dense(flat, fc), ReLU(), Dense(fc, spec.classes),
        ]  # fmt: skip
    # cifar_alexnet
    ch = [_scaled(n, spec.width) for n in (64, 192, 384, 256, 256)]
    layers = [
        Conv2d(c, ch[0], 11, stride=4, pad=5), ReLU(), MaxPool2(),
        Conv2d(ch[0], ch[1], 5, pad=2), ReLU(), MaxPool2(),
        Conv2d(ch[1], ch[2], 3, pad=1), ReLU(),
        Conv2d(ch[2], ch[3], 3, pad=1), ReLU(),
        Conv2d(ch[3], ch[4], 3, pad=1), ReLU(), MaxPool2(),
        Flatten(),
    ]  # fmt: skip
    shape = spec.input_shape
    for layer in layers:
        shape = layer.out_shape(shape)
    layers.append(Dense(shape[0], spec.classes))
    return layers


class _Network:
    def __init__(self, spec: ModelSpec):
        self.layers = _build_layers(spec)
        self.slices: list[list[tuple[int, tuple[int, ...]]]] = []
        offset = 0
        shape = spec.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
            if min(shape) < 1:
                raise InputError(f"input {spec.input_shape} too small for {spec.architecture}")
            entries = []
            for s in layer.shapes:
                entries.append((offset, s))
                offset += math.prod(s)
            self.slices.append(entries)
        self.size = offset

    def views(self, flat: np.ndarray) -> list[list[np.ndarray]]:
        return [[flat[o : o + math.prod(s)].reshape(s) for o, s in entries] for entries in self.slices]


@functools.lru_cache(maxsize=None)
def _network(spec: ModelSpec) -> _Network:
    return _Network(spec)


# --------------------------------------------------------------------------- models


@dataclass(frozen=True, eq=False)
class Model:
    spec: ModelSpec
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        params = np.asarray(self.params, dtype=np.float64)
        if params.ndim != 1 or params.size != self.spec.num_params:
            raise InputError(f"expected {self.spec.num_params} parameters, got shape {params.shape}")
        object.__setattr__(self, "params", params)


def init_model(spec: ModelSpec, seed) -> Model:
    """Kaiming-uniform weights (bound sqrt(6/fan_in)), biases U(+-1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    net = _network(spec)
    flat = np.zeros(net.size)
    for layer, views in zip(net.layers, net.views(flat)):
        if not views:
            continue
        w, b = views
        w[...] = rng.uniform(-1.0, 1.0, size=w.shape) * math.sqrt(6.0 / layer.fan_in)
        b[...] = rng.uniform(-1.0, 1.0, size=b.shape) / math.sqrt(layer.fan_in)
    return Model(spec, flat)


def flatten(model: Model) -> np.ndarray:
    return model.params.copy()


def unflatten(spec: ModelSpec, vector) -> Model:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (spec.num_params,):
        raise InputError(f"vector of length {vector.size} does not match K={spec.num_params}")
    return Model(spec, vector.copy())


def structured(model: Model) -> list[list[np.ndarray]]:
    """Per-layer [weight, bias] views into the model's flat parameters."""
    return _network(model.spec).views(model.params)


def _check_batch(spec: ModelSpec, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise InputError(f"batch shape {x.shape} does not match (B, *{spec.input_shape})")
    return x


def _run_forward(model: Model, x: np.ndarray):
    net = _network(model.spec)
    caches = []
    for layer, params in zip(net.layers, net.views(model.params)):
        x, cache = layer.forward(x, params)
        caches.append(cache)
    return x, caches


def forward(model: Model, batch) -> np.ndarray:
    """Logits of shape (batch, classes)."""
    logits, _ = _run_forward(model, _check_batch(model.spec, batch))
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_proba(model: Model, batch, chunk: int = 1024) -> np.ndarray:
    x = _check_batch(model.spec, batch)
    return np.concatenate([softmax(forward(model, x[i : i + chunk])) for i in range(0, len(x), chunk)])


def predict(model: Model, batch, chunk: int = 1024) -> np.ndarray:
    x = _check_batch(model.spec, batch)
    return np.concatenate([forward(model, x[i : i + chunk]).argmax(axis=1) for i in range(0, len(x), chunk)])


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = len(labels)
    idx = np.arange(n)
    loss = float(np.mean(logsum - z[idx, labels]))
    dz = np.exp(z - logsum[:, None])
    dz[idx, labels] -= 1.0
    return loss, dz / n


def loss_and_grad(model: Model, batch, labels, composite=None, context: str = "") -> tuple[float, np.ndarray]:
    """Cross-entropy plus an optional ``alpha * prox`` term, and the flat gradient.

    ``composite`` is ``(alpha, metric, reference)`` where ``metric`` exposes
    ``value_and_grad(params, reference) -> (float, ndarray)``.
    """
    spec = model.spec
    x = _check_batch(spec, batch)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(x),):
        raise InputError("one label per image required")
    if labels.size and (labels.min() < 0 or labels.max() >= spec.classes):
        raise InputError(f"labels outside [0, {spec.classes})")

    net = _network(spec)
    logits, caches = _run_forward(model, x)
    loss, dy = cross_entropy(logits, labels)

    grad = np.zeros(net.size)
    grad_views = net.views(grad)
    param_views = net.views(model.params)
    for i in range(len(net.layers) - 1, -1, -1):
        dy = net.layers[i].backward(dy, caches[i], param_views[i], grad_views[i])

    if composite is not None:
        alpha, metric, reference = composite
        reference = np.asarray(reference, dtype=np.float64)
        if reference.shape != model.params.shape:
            raise InputError("prox reference has a different K than the model")
        if alpha != 0:
            value, pgrad = metric.value_and_grad(model.params, reference)
            loss += alpha * value
            grad += alpha * pgrad

    if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite loss {loss}" + (f" ({context})" if context else ""))
    return loss, grad


def sgd_step(model: Model, grad, lr: float) -> Model:
    return Model(model.spec, model.params - lr * np.asarray(grad, dtype=np.float64))


def train_local(model: Model, data, epochs: int, lr: float, batch: int, composite=None, seed=0, context: str = "") -> Model:
    """Plain minibatch SGD; the shuffle order is drawn from ``seed`` only.

    ``composite`` is forwarded to :func:`loss_and_grad` at every step, unless
    its metric offers a closed-form ``proximal_step``; then each step is a
    cross-entropy gradient step followed by that proximal map.
    """
    n = len(data)
    if n == 0:
        raise InputError("cannot train on an empty dataset")
    if epochs < 0:
        raise InputError("epochs must be non-negative")
    rng = np.random.default_rng(seed)
    images, labels = data.images, data.labels
    params = model.params.copy()
    spec = model.spec
    # euclidean prox is applied as an exact proximal step, which is stable for any alpha
    prox_split = False
    if composite is not None and composite[0] != 0 and hasattr(composite[1], "proximal_step"):
        alpha, metric, reference = composite
        reference = np.asarray(reference, dtype=np.float64)
        prox_split = metric.proximal_step(params, reference, 0.0) is not None
    for epoch in range(epochs):
        order = rng.permutation(n)
        for step, start in enumerate(range(0, n, batch)):
            idx = order[start : start + batch]
            where = f"{context} epoch {epoch} batch {step}".strip()
            _, grad = loss_and_grad(Model(spec, params), images[idx], labels[idx], None if prox_split else composite, where)
            params -= lr * grad
            if prox_split:
                params = metric.proximal_step(params, reference, lr * alpha)
    return Model(spec, params)


def accuracy(model: Model, images, labels) -> float:
    if len(labels) == 0:
        raise InputError("empty evaluation set")
    return float(np.mean(predict(model, images) == np.asarray(labels)))


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(model: Model, path) -> None:
    """Little-endian ``CHMP`` | u32 version | u32 K | K float32; spec goes to ``<path>.json``."""
    path = Path(path)
    k = model.params.size
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, k))
        fh.write(model.params.astype("<f4").tobytes())
    Path(str(path) + ".json").write_text(json.dumps(model.spec.to_dict(), sort_keys=True))


def load_checkpoint(path) -> Model:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header at offset {len(raw)}")
    version, k = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    if len(raw) != 12 + 4 * k:
        raise FormatError(f"{path}: expected {12 + 4 * k} bytes, found {len(raw)}")
    spec = ModelSpec.from_dict(json.loads(Path(str(path) + ".json").read_text()))
    values = np.frombuffer(raw, dtype="<f4", offset=12, count=k).astype(np.float64)
    return unflatten(spec, values)
