"""Batched layers with exact per-example parameter gradients.

Every layer works on a leading batch axis. ``backward`` stores what is needed
to produce, for each example separately, the gradient of that example's loss
with respect to the layer parameters. Three views of those gradients exist:

* ``grads()`` materializes them as ``(B, *param.shape)`` arrays,
* ``sq_norms()`` returns their squared L2 norms per example,
* ``weighted_sum(w)`` returns ``sum_b w[b] * grad_b`` for every parameter.

Layers whose gradients are sums of outer products (dense, LSTM) compute the
last two without materializing anything.
"""

from __future__ import annotations

import numpy as np


class Layer:
    """Parameter-free layer; subclasses with parameters override the grad views."""

    param_names: tuple[str, ...] = ()

    def __init__(self, prefix: str = "") -> None:
        self.prefix = prefix

    def key(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def forward(self, params: dict, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, params: dict, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def sq_norms(self) -> np.ndarray | float:
        g = self.grads()
        total = 0.0
        for arr in g.values():
            flat = arr.reshape(arr.shape[0], -1)
            total = total + np.einsum("bi,bi->b", flat, flat)
        return total

    def weighted_sum(self, w: np.ndarray) -> dict[str, np.ndarray]:
        return {k: np.tensordot(w, v, axes=(0, 0)) for k, v in self.grads().items()}


class Dense(Layer):
    """``y = x @ W + b`` on inputs of shape ``(B, n_in)``."""

    param_names = ("W", "b")

    def forward(self, params, x):
        self._x = x
        return x @ params[self.key("W")] + params[self.key("b")]

    def backward(self, params, dy):
        self._dy = dy
        return dy @ params[self.key("W")].T

    def grads(self):
        return {
            self.key("W"): np.einsum("bi,bo->bio", self._x, self._dy),
            self.key("b"): self._dy.copy(),
        }

    def sq_norms(self):
        dy2 = np.einsum("bo,bo->b", self._dy, self._dy)
        x2 = np.einsum("bi,bi->b", self._x, self._x)
        return dy2 * x2 + dy2

    def weighted_sum(self, w):
        wdy = self._dy * w[:, None]
        return {self.key("W"): self._x.T @ wdy, self.key("b"): wdy.sum(axis=0)}


class ReLU(Layer):
    def forward(self, params, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, params, dy):
        return np.where(self._mask, dy, 0.0)


class Sigmoid(Layer):
    def forward(self, params, x):
        # split form avoids overflow warnings for large |x|
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self._y = out
        return out

    def backward(self, params, dy):
        return dy * self._y * (1.0 - self._y)


class Tanh(Layer):
    def forward(self, params, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, params, dy):
        return dy * (1.0 - self._y**2)


class Reshape(Layer):
    def __init__(self, shape: tuple[int, ...], prefix: str = "") -> None:
        super().__init__(prefix)
        self.shape = tuple(shape)

    def forward(self, params, x):
        self._in_shape = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, params, dy):
        return dy.reshape(self._in_shape)


class Conv2D(Layer):
    """Stride-1 'same' convolution on ``(B, C, H, W)`` with an odd square kernel.

    Weights are stored as ``(C_in * k * k, C_out)`` so the forward pass is a
    single matmul against the im2col patch matrix.
    """

    param_names = ("W", "b")

    def __init__(self, c_in: int, c_out: int, k: int, prefix: str = "") -> None:
        super().__init__(prefix)
        if k % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {k}")
        self.c_in, self.c_out, self.k = c_in, c_out, k

    def _patches(self, x):
        b, c, h, w = x.shape
        k, p = self.k, self.k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = np.empty((b, h, w, c, k, k), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, :, :, i, j] = xp[:, :, i : i + h, j : j + w].transpose(0, 2, 3, 1)
        return cols.reshape(b, h * w, c * k * k)

    def forward(self, params, x):
        b, c, h, w = x.shape
        if c != self.c_in:
            raise ValueError(f"expected {self.c_in} input channels, got {c}")
        self._in_shape = x.shape
        self._cols = self._patches(x)
        y = self._cols @ params[self.key("W")] + params[self.key("b")]
        return y.reshape(b, h, w, self.c_out).transpose(0, 3, 1, 2)

    def backward(self, params, dy):
        b, c, h, w = self._in_shape
        k, p = self.k, self.k // 2
        self._dy = dy.transpose(0, 2, 3, 1).reshape(b, h * w, self.c_out)
        dcols = (self._dy @ params[self.key("W")].T).reshape(b, h, w, c, k, k)
        dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + h, j : j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p : p + h, p : p + w]

    def grads(self):
        return {
            self.key("W"): np.einsum("bpi,bpo->bio", self._cols, self._dy),
            self.key("b"): self._dy.sum(axis=1),
        }

    def weighted_sum(self, w):
        wdy = self._dy * w[:, None, None]
        return {
            self.key("W"): np.einsum("bpi,bpo->io", self._cols, wdy),
            self.key("b"): wdy.sum(axis=(0, 1)),
        }


class MaxPool2(Layer):
    """2x2 max pooling, stride 2; odd spatial sizes are padded with -inf (ceil mode)."""

    def forward(self, params, x):
        b, c, h, w = x.shape
        self._in_shape = x.shape
        h2, w2 = -(-h // 2), -(-w // 2)
        xp = np.full((b, c, 2 * h2, 2 * w2), -np.inf, dtype=x.dtype)
        xp[:, :, :h, :w] = x
        blocks = xp.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
        self._arg = blocks.argmax(axis=-1)
        return np.take_along_axis(blocks, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, params, dy):
        b, c, h, w = self._in_shape
        h2, w2 = dy.shape[2], dy.shape[3]
        blocks = np.zeros((b, c, h2, w2, 4), dtype=dy.dtype)
        np.put_along_axis(blocks, self._arg[..., None], dy[..., None], axis=-1)
        dxp = blocks.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)
        return dxp[:, :, :h, :w]


class Upsample2(Layer):
    """Nearest-neighbour 2x upsampling."""

    def forward(self, params, x):
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, params, dy):
        b, c, h, w = dy.shape
        return dy.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


class CenterCrop(Layer):
    def __init__(self, size: int, prefix: str = "") -> None:
        super().__init__(prefix)
        self.size = size

    def forward(self, params, x):
        self._in_shape = x.shape
        h, w = x.shape[2:]
        self._top, self._left = (h - self.size) // 2, (w - self.size) // 2
        return x[:, :, self._top : self._top + self.size, self._left : self._left + self.size]

    def backward(self, params, dy):
        dx = np.zeros(self._in_shape, dtype=dy.dtype)
        dx[:, :, self._top : self._top + self.size, self._left : self._left + self.size] = dy
        return dx


class LSTM(Layer):
    """Single LSTM layer over ``(B, T, n_in)`` returning all hidden states ``(B, T, H)``.

    Gate order in the fused weight matrices is input, forget, cell, output.
    """

    param_names = ("Wx", "Wh", "b")

    def __init__(self, n_in: int, hidden: int, prefix: str = "") -> None:
        super().__init__(prefix)
        self.n_in, self.hidden = n_in, hidden

    def forward(self, params, x):
        b, t, _ = x.shape
        hd = self.hidden
        wx, wh, bias = params[self.key("Wx")], params[self.key("Wh")], params[self.key("b")]
        xz = x @ wx + bias
        h = np.zeros((b, hd), dtype=x.dtype)
        c = np.zeros((b, hd), dtype=x.dtype)
        self._x = x
        self._hprev = np.empty((b, t, hd), dtype=x.dtype)
        self._cprev = np.empty((b, t, hd), dtype=x.dtype)
        self._gates = np.empty((b, t, 4 * hd), dtype=x.dtype)
        self._tanh_c = np.empty((b, t, hd), dtype=x.dtype)
        out = np.empty((b, t, hd), dtype=x.dtype)
        for s in range(t):
            self._hprev[:, s] = h
            self._cprev[:, s] = c
            z = xz[:, s] + h @ wh
            i = _sigmoid(z[:, :hd])
            f = _sigmoid(z[:, hd : 2 * hd])
            g = np.tanh(z[:, 2 * hd : 3 * hd])
            o = _sigmoid(z[:, 3 * hd :])
            c = f * c + i * g
            tc = np.tanh(c)
            h = o * tc
            self._gates[:, s] = np.concatenate([i, f, g, o], axis=1)
            self._tanh_c[:, s] = tc
            out[:, s] = h
        return out

    def backward(self, params, dy):
        b, t, hd = dy.shape
        wx, wh = params[self.key("Wx")], params[self.key("Wh")]
        dz_all = np.empty((b, t, 4 * hd), dtype=dy.dtype)
        dh_next = np.zeros((b, hd), dtype=dy.dtype)
        dc_next = np.zeros((b, hd), dtype=dy.dtype)
        for s in reversed(range(t)):
            gates = self._gates[:, s]
            i, f, g, o = (gates[:, k * hd : (k + 1) * hd] for k in range(4))
            tc = self._tanh_c[:, s]
            dh = dy[:, s] + dh_next
            dc = dc_next + dh * o * (1.0 - tc**2)
            dz = np.concatenate(
                [
                    dc * g * i * (1.0 - i),
                    dc * self._cprev[:, s] * f * (1.0 - f),
                    dc * i * (1.0 - g**2),
                    dh * tc * o * (1.0 - o),
                ],
                axis=1,
            )
            dz_all[:, s] = dz
            dh_next = dz @ wh.T
            dc_next = dc * f
        self._dz = dz_all
        return dz_all @ wx.T

    def grads(self):
        return {
            self.key("Wx"): np.einsum("bti,btg->big", self._x, self._dz),
            self.key("Wh"): np.einsum("bth,btg->bhg", self._hprev, self._dz),
            self.key("b"): self._dz.sum(axis=1),
        }

    def sq_norms(self):
        # ||sum_t a_t (x) d_t||^2 = sum_{t,s} (a_t . a_s)(d_t . d_s)
        gz = np.einsum("btg,bsg->bts", self._dz, self._dz)
        gx = np.einsum("bti,bsi->bts", self._x, self._x)
        gh = np.einsum("bti,bsi->bts", self._hprev, self._hprev)
        return np.einsum("bts,bts->b", gz, gx + gh + 1.0)

    def weighted_sum(self, w):
        wdz = self._dz * w[:, None, None]
        return {
            self.key("Wx"): np.einsum("bti,btg->ig", self._x, wdz),
            self.key("Wh"): np.einsum("bth,btg->hg", self._hprev, wdz),
            self.key("b"): wdz.sum(axis=(0, 1)),
        }


class LastStep(Layer):
    """Select the final time step of a ``(B, T, H)`` sequence."""

    def forward(self, params, x):
        self._in_shape = x.shape
        return x[:, -1, :]

    def backward(self, params, dy):
        dx = np.zeros(self._in_shape, dtype=dy.dtype)
        dx[:, -1, :] = dy
        return dx


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# ---------------------------------------------------------------------------
# losses: each returns per-example losses and d(loss_b)/d(output_b)


def mse_loss(y: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-example mean squared error over all non-batch axes."""
    diff = (y - target).reshape(y.shape[0], -1)
    d = diff.shape[1]
    losses = np.einsum("bi,bi->b", diff, diff) / d
    return losses, (2.0 / d * diff).reshape(y.shape)


def cross_entropy_loss(logits: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Softmax cross-entropy; ``target`` holds integer class ids."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    idx = np.arange(logits.shape[0])
    losses = logz - shifted[idx, target]
    probs = np.exp(shifted - logz[:, None])
    dlogits = probs
    dlogits[idx, target] -= 1.0
    # -log(1) can come out as a tiny negative from rounding
    return np.maximum(losses, 0.0), dlogits


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)
