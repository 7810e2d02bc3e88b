"""Model architectures, construction and the loss/gradient entry points."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

import numpy as np

from dpanomaly.nn import layers as L

KINDS = ("dense-autoencoder", "conv-autoencoder", "lstm-lm", "classifier", "mlp")
MSE = "reconstruction-mse"
CROSS_ENTROPY = "cross-entropy"


class ArchError(ValueError):
    """Raised for an internally inconsistent architecture description."""


class InputError(ValueError):
    """Raised when inputs do not fit the model."""


@dataclass(frozen=True)
class ModelArch:
    """Architecture description.

    ``widths`` are the dense layer widths including input and output
    (dense autoencoder, mlp, dense classifier). ``channels`` are conv channel
    counts for the conv autoencoder encoder or the conv classifier.
    """

    kind: str
    widths: tuple[int, ...] = ()
    channels: tuple[int, ...] = ()
    kernel_size: int = 3
    image_size: int = 28
    n_classes: int = 10
    vocab_size: int = 0
    history: int = 0
    hidden: int = 64
    lstm_layers: int = 1
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelArch:
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @property
    def loss_kind(self) -> str:
        return MSE if self.kind in ("dense-autoencoder", "conv-autoencoder", "mlp") else CROSS_ENTROPY

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ArchError(f"unknown model kind {self.kind!r}")
        if self.activation not in ("relu", "tanh", "sigmoid"):
            raise ArchError(f"unknown activation {self.activation!r}")
        if self.kind == "dense-autoencoder":
            w = self.widths
            if len(w) < 3 or w != w[::-1]:
                raise ArchError(f"autoencoder widths must mirror, got {list(w)}")
        elif self.kind == "mlp":
            if len(self.widths) < 2:
                raise ArchError("mlp needs at least input and output widths")
        elif self.kind == "conv-autoencoder":
            if not self.channels or self.kernel_size % 2 == 0:
                raise ArchError("conv autoencoder needs channels and an odd kernel")
        elif self.kind == "classifier":
            if not self.channels and len(self.widths) < 2:
                raise ArchError("classifier needs conv channels or dense widths")
            if self.widths and not self.channels and self.widths[-1] != self.n_classes:
                raise ArchError("dense classifier output width must equal n_classes")
        elif self.kind == "lstm-lm":
            if self.vocab_size < 2 or self.history < 1 or self.hidden < 1 or self.lstm_layers < 1:
                raise ArchError("lstm-lm needs vocab_size >= 2, history >= 1, hidden >= 1")
        if any(v <= 0 for v in self.widths + self.channels):
            raise ArchError("layer sizes must be positive")


def dense_autoencoder(widths=(784, 128, 32, 128, 784)) -> ModelArch:
    return ModelArch("dense-autoencoder", widths=tuple(widths))


def conv_autoencoder(channels=(16, 8, 8), kernel_size=3) -> ModelArch:
    return ModelArch("conv-autoencoder", channels=tuple(channels), kernel_size=kernel_size)


def conv_classifier(channels=(8, 16), kernel_size=5, n_classes=10) -> ModelArch:
    return ModelArch("classifier", channels=tuple(channels), kernel_size=kernel_size, n_classes=n_classes)


def lstm_lm(vocab_size=29, history=10, hidden=64, lstm_layers=1) -> ModelArch:
    return ModelArch("lstm-lm", vocab_size=vocab_size, history=history, hidden=hidden, lstm_layers=lstm_layers)


def _activation(name: str, prefix: str) -> L.Layer:
    return {"relu": L.ReLU, "tanh": L.Tanh, "sigmoid": L.Sigmoid}[name](prefix)


def _layers_and_shapes(arch: ModelArch) -> tuple[list[L.Layer], dict[str, tuple[tuple[int, ...], int]]]:
    """Layer stack plus ``name -> (shape, fan_in)`` for every parameter, in order."""
    stack: list[L.Layer] = []
    shapes: dict[str, tuple[tuple[int, ...], int]] = {}

    def dense(name, n_in, n_out):
        stack.append(L.Dense(name))
        shapes[f"{name}.W"] = ((n_in, n_out), n_in)
        shapes[f"{name}.b"] = ((n_out,), n_in)

    def conv(name, c_in, c_out, k):
        stack.append(L.Conv2D(c_in, c_out, k, name))
        shapes[f"{name}.W"] = ((c_in * k * k, c_out), c_in * k * k)
        shapes[f"{name}.b"] = ((c_out,), c_in * k * k)

    act = arch.activation
    if arch.kind in ("dense-autoencoder", "mlp"):
        w = arch.widths
        for i in range(len(w) - 1):
            dense(f"dense{i}", w[i], w[i + 1])
            if i < len(w) - 2:
                stack.append(_activation(act, f"act{i}"))
        if arch.kind == "dense-autoencoder":
            stack.append(L.Sigmoid("out"))
    elif arch.kind == "conv-autoencoder":
        k, chans, size = arch.kernel_size, arch.channels, arch.image_size
        c_prev = 1
        for i, c in enumerate(chans):
            conv(f"enc{i}", c_prev, c, k)
            stack.append(_activation(act, f"enc{i}.act"))
            stack.append(L.MaxPool2())
            c_prev = c
        for i, c in enumerate(reversed(chans)):
            conv(f"dec{i}", c_prev, c, k)
            stack.append(_activation(act, f"dec{i}.act"))
            stack.append(L.Upsample2())
            c_prev = c
        up = size
        for _ in chans:
            up = -(-up // 2)
        up *= 2 ** len(chans)
        if up != size:
            stack.append(L.CenterCrop(size))
        conv("out", c_prev, 1, k)
        stack.append(L.Sigmoid("out.act"))
    elif arch.kind == "classifier":
        if arch.channels:
            k, size, c_prev = arch.kernel_size, arch.image_size, 1
            for i, c in enumerate(arch.channels):
                conv(f"conv{i}", c_prev, c, k)
                stack.append(_activation(act, f"conv{i}.act"))
                stack.append(L.MaxPool2())
                size = -(-size // 2)
                c_prev = c
            flat = c_prev * size * size
            stack.append(L.Reshape((flat,)))
            dense("fc", flat, arch.n_classes)
        else:
            w = arch.widths
            for i in range(len(w) - 1):
                dense(f"dense{i}", w[i], w[i + 1])
                if i < len(w) - 2:
                    stack.append(_activation(act, f"act{i}"))
    elif arch.kind == "lstm-lm":
        n_in = arch.vocab_size + 1  # one-hot with a reserved start token
        for i in range(arch.lstm_layers):
            stack.append(L.LSTM(n_in, arch.hidden, f"lstm{i}"))
            shapes[f"lstm{i}.Wx"] = ((n_in, 4 * arch.hidden), arch.hidden)
            shapes[f"lstm{i}.Wh"] = ((arch.hidden, 4 * arch.hidden), arch.hidden)
            shapes[f"lstm{i}.b"] = ((4 * arch.hidden,), arch.hidden)
            n_in = arch.hidden
        stack.append(L.LastStep())
        dense("out", arch.hidden, arch.vocab_size)
    return stack, shapes


@dataclass
class Model:
    arch: ModelArch
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.arch.validate()
        self._stack, shapes = _layers_and_shapes(self.arch)
        self._shapes = {k: s for k, (s, _) in shapes.items()}
        if self.params:
            if list(self.params) != list(self._shapes):
                raise ArchError("parameter names do not match the architecture")
            for k, v in self.params.items():
                if v.shape != self._shapes[k]:
                    raise ArchError(f"{k}: shape {v.shape} != {self._shapes[k]}")

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    @property
    def loss_kind(self) -> str:
        return self.arch.loss_kind

    def flat_params(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        i = 0
        for k, v in self.params.items():
            self.params[k] = np.asarray(flat[i : i + v.size], dtype=np.float64).reshape(v.shape).copy()
            i += v.size

    def copy(self) -> Model:
        return Model(self.arch, {k: v.copy() for k, v in self.params.items()})

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()

    # -- batched machinery ---------------------------------------------------

    def prepare_inputs(self, x) -> np.ndarray:
        """Map raw samples (pixels or token ids) to the network input tensor."""
        arch = self.arch
        if arch.kind == "lstm-lm":
            x = np.asarray(x)
            if x.ndim != 2 or x.shape[1] != arch.history:
                raise InputError(f"expected histories of length {arch.history}, got shape {x.shape}")
            if x.size and (x.min() < 0 or x.max() > arch.vocab_size):
                raise InputError("token id outside the vocabulary")
            return np.eye(arch.vocab_size + 1)[x.astype(np.int64)]
        x = np.asarray(x, dtype=np.float64)
        if arch.kind in ("dense-autoencoder", "mlp") or (arch.kind == "classifier" and not arch.channels):
            x = x.reshape(x.shape[0], -1)
            if x.shape[1] != arch.widths[0]:
                raise InputError(f"expected {arch.widths[0]} input features, got {x.shape[1]}")
            return x
        s = arch.image_size
        if x.size != x.shape[0] * s * s:
            raise InputError(f"expected {s}x{s} images, got shape {x.shape}")
        return x.reshape(x.shape[0], 1, s, s)

    def prepare_targets(self, x, y) -> np.ndarray:
        if self.arch.kind in ("dense-autoencoder", "conv-autoencoder"):
            return x if y is None else self.prepare_inputs(y)
        if self.arch.kind == "mlp":
            if y is None:
                return x
            y = np.asarray(y, dtype=np.float64)
            return y.reshape(y.shape[0], -1)
        y = np.asarray(y, dtype=np.int64)
        n_out = self.arch.vocab_size if self.arch.kind == "lstm-lm" else self.arch.n_classes
        if y.size and (y.min() < 0 or y.max() >= n_out):
            raise InputError("target id outside the output range")
        return y

    def output(self, x) -> np.ndarray:
        h = self.prepare_inputs(x)
        for layer in self._stack:
            h = layer.forward(self.params, h)
        return h

    def _loss_fn(self, kind: str | None):
        kind = kind or self.loss_kind
        if kind == MSE:
            return L.mse_loss
        if kind == CROSS_ENTROPY:
            return L.cross_entropy_loss
        raise ValueError(f"unknown loss kind {kind!r}")

    def losses(self, x, y=None, kind: str | None = None, batch_size: int = 1000) -> np.ndarray:
        """Per-example losses, evaluated in chunks."""
        n = len(x)
        out = np.empty(n)
        loss_fn = self._loss_fn(kind)
        for start in range(0, n, batch_size):
            xs = x[start : start + batch_size]
            ys = None if y is None else y[start : start + batch_size]
            inp = self.prepare_inputs(xs)
            tgt = self.prepare_targets(inp, ys)
            h = inp
            for layer in self._stack:
                h = layer.forward(self.params, h)
            out[start : start + batch_size] = loss_fn(h, tgt)[0]
        return out

    def backprop(self, x, y=None, kind: str | None = None) -> np.ndarray:
        """Forward and backward pass on a batch; returns per-example losses.

        Afterwards ``sq_norms`` / ``weighted_grad`` / ``example_grads`` read the
        per-example gradients of this batch.
        """
        if len(x) == 0:
            raise InputError("empty batch")
        inp = self.prepare_inputs(x)
        tgt = self.prepare_targets(inp, y)
        h = inp
        for layer in self._stack:
            h = layer.forward(self.params, h)
        losses, d = self._loss_fn(kind)(h, tgt)
        for layer in reversed(self._stack):
            d = layer.backward(self.params, d)
        self._batch = len(losses)
        return losses

    def _param_layers(self):
        return [layer for layer in self._stack if layer.param_names]

    def sq_norms(self) -> np.ndarray:
        total = np.zeros(self._batch)
        for layer in self._param_layers():
            total = total + layer.sq_norms()
        return total

    def weighted_grad(self, w: np.ndarray) -> np.ndarray:
        """Flattened ``sum_b w[b] * grad_b`` in parameter order."""
        parts = {}
        for layer in self._param_layers():
            parts.update(layer.weighted_sum(np.asarray(w, dtype=np.float64)))
        return np.concatenate([parts[k].ravel() for k in self.params])

    def example_grads(self) -> np.ndarray:
        parts = {}
        for layer in self._param_layers():
            parts.update(layer.grads())
        return np.concatenate([parts[k].reshape(self._batch, -1) for k in self.params], axis=1)


def build_model(arch: ModelArch, seed: int) -> Model:
    """Initialize parameters as U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at zero."""
    arch.validate()
    _, shapes = _layers_and_shapes(arch)
    rng = np.random.default_rng(seed)
    params = {}
    for name, (shape, fan_in) in shapes.items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            lim = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-lim, lim, size=shape)
    return Model(arch, params)


def forward_loss(model: Model, x, y=None, kind: str | None = None) -> float:
    """Loss of a single sample ``x`` (with target ``y``; autoencoders use ``x``)."""
    xs = np.asarray(x)[None]
    ys = None if y is None else np.asarray(y)[None]
    return float(model.losses(xs, ys, kind)[0])


def per_example_gradients(model: Model, x, y=None, kind: str | None = None) -> np.ndarray:
    """Flattened per-example gradients, one row per sample, shape ``(B, n_params)``."""
    model.backprop(x, y, kind)
    return model.example_grads()


def predict_distribution(model: Model, history) -> np.ndarray:
    """Next-token distribution for one history (or a batch of histories)."""
    if model.arch.kind != "lstm-lm":
        raise InputError("predict_distribution needs an lstm-lm model")
    h = np.asarray(history)
    single = h.ndim == 1
    logits = model.output(h[None] if single else h)
    probs = L.softmax(logits)
    return probs[0] if single else probs
