"""Layers with explicit forward/backward passes on numpy arrays.

Every layer caches what its backward pass needs during forward.  Parameter
gradients accumulate into `grads` keyed like `params`.  Weight matrices are
marked quantizable; biases and batch-norm gain/shift are not.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Input shape incompatible with a layer; message names the layer."""


class InvalidStateError(RuntimeError):
    """Backward called without a matching forward cache."""


def uniform_fan_init(rng: np.random.Generator, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """Base class; subclasses fill params/grads/quantizable."""

    def __init__(self, name: str, dtype=np.float64):
        self.name = name
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.quantizable: frozenset = frozenset()
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def quant_groups(self) -> list[list[str]]:
        """Parameter names grouped by shared quantization step."""
        return [[p] for p in sorted(self.quantizable)]

    def _take_cache(self):
        if self._cache is None:
            raise InvalidStateError(f"{self.name}: backward without forward")
        cache, self._cache = self._cache, None
        return cache

    def zero_grads(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


class FullyConnected(Layer):
    def __init__(self, name, fan_in, fan_out, rng, dtype=np.float64):
        super().__init__(name, dtype)
        self.fan_in, self.fan_out = fan_in, fan_out
        self.params["W"] = uniform_fan_init(rng, (fan_in, fan_out), fan_in, fan_out, self.dtype)
        self.params["b"] = np.zeros(fan_out, dtype=self.dtype)
        self.quantizable = frozenset({"W"})
        self.zero_grads()

    def forward(self, x, train=True):
        if x.ndim < 2 or x.shape[-1] != self.fan_in:
            raise ShapeError(
                f"{self.name}: expected input (..., {self.fan_in}), got {x.shape}"
            )
        self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dy):
        x = self._take_cache()
        x2 = x.reshape(-1, self.fan_in)
        dy2 = dy.reshape(-1, self.fan_out)
        self.grads["W"] += x2.T @ dy2
        self.grads["b"] += dy2.sum(axis=0)
        return dy @ self.params["W"].T


_ACTS = {
    "linear": (lambda z: z, lambda z, y: np.ones_like(y)),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, y: (z > 0).astype(z.dtype)),
    "sigmoid": (
        lambda z: 1.0 / (1.0 + np.exp(-z)),
        lambda z, y: y * (1.0 - y),
    ),
    "tanh": (np.tanh, lambda z, y: 1.0 - y * y),
}


class Activation(Layer):
    def __init__(self, name, fn: str, dtype=np.float64):
        super().__init__(name, dtype)
        if fn not in _ACTS:
            raise ValueError(f"{name}: unknown activation {fn!r}")
        self.fn = fn

    def forward(self, x, train=True):
        f, _ = _ACTS[self.fn]
        y = f(x)
        self._cache = (x, y)
        return y

    def backward(self, dy):
        x, y = self._take_cache()
        _, df = _ACTS[self.fn]
        return dy * df(x, y)


class Softmax(Layer):
    """Row softmax over the last axis."""

    def forward(self, x, train=True):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)
        self._cache = p
        return p

    def backward(self, dy):
        p = self._take_cache()
        inner = (dy * p).sum(axis=-1, keepdims=True)
        return p * (dy - inner)


class Flatten(Layer):
    def forward(self, x, train=True):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._take_cache())


def _im2col(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(b, c * kh * kw, oh * ow), oh, ow


def _col2im(cols, x_shape, kh, kw, stride, pad):
    b, c, h, w = x_shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad : pad + h, pad : pad + w]
    return xp


class Conv2D(Layer):
    def __init__(self, name, in_ch, out_ch, kernel, rng, stride=1, padding=0, dtype=np.float64):
        super().__init__(name, dtype)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = in_ch * kernel * kernel
        fan_out = out_ch * kernel * kernel
        self.params["W"] = uniform_fan_init(
            rng, (out_ch, in_ch, kernel, kernel), fan_in, fan_out, self.dtype
        )
        self.params["b"] = np.zeros(out_ch, dtype=self.dtype)
        self.quantizable = frozenset({"W"})
        self.zero_grads()

    def forward(self, x, train=True):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(
                f"{self.name}: expected input (batch, {self.in_ch}, h, w), got {x.shape}"
            )
        cols, oh, ow = _im2col(x, self.kernel, self.kernel, self.stride, self.padding)
        wmat = self.params["W"].reshape(self.out_ch, -1)
        out = np.einsum("ok,bkp->bop", wmat, cols, optimize=True)
        out += self.params["b"][None, :, None]
        self._cache = (x.shape, cols)
        return out.reshape(x.shape[0], self.out_ch, oh, ow)

    def backward(self, dy):
        x_shape, cols = self._take_cache()
        b = dy.shape[0]
        dym = dy.reshape(b, self.out_ch, -1)
        wmat = self.params["W"].reshape(self.out_ch, -1)
        self.grads["W"] += np.einsum("bop,bkp->ok", dym, cols, optimize=True).reshape(
            self.params["W"].shape
        )
        self.grads["b"] += dym.sum(axis=(0, 2))
        dcols = np.einsum("ok,bop->bkp", wmat, dym, optimize=True)
        return _col2im(dcols, x_shape, self.kernel, self.kernel, self.stride, self.padding)


class MaxPool2D(Layer):
    def __init__(self, name, size, stride=None, dtype=np.float64):
        super().__init__(name, dtype)
        self.size = size
        self.stride = stride or size

    def forward(self, x, train=True):
        if x.ndim != 4:
            raise ShapeError(f"{self.name}: expected 4-d input, got {x.shape}")
        cols, oh, ow = _im2col(
            x.reshape(x.shape[0] * x.shape[1], 1, x.shape[2], x.shape[3]),
            self.size, self.size, self.stride, 0,
        )
        # cols: (b*c, size*size, oh*ow)
        idx = cols.argmax(axis=1)
        out = np.take_along_axis(cols, idx[:, None, :], axis=1)[:, 0, :]
        self._cache = (x.shape, cols.shape, idx, oh, ow)
        return out.reshape(x.shape[0], x.shape[1], oh, ow)

    def backward(self, dy):
        x_shape, cols_shape, idx, oh, ow = self._take_cache()
        dcols = np.zeros(cols_shape, dtype=dy.dtype)
        flat = dy.reshape(x_shape[0] * x_shape[1], 1, -1)
        np.put_along_axis(dcols, idx[:, None, :], flat, axis=1)
        dx = _col2im(
            dcols, (x_shape[0] * x_shape[1], 1, x_shape[2], x_shape[3]),
            self.size, self.size, self.stride, 0,
        )
        return dx.reshape(x_shape)


class BatchNorm(Layer):
    """Batch normalization over features; gain/shift stay floating point.

    Accepts (batch, features) or (batch, channels, h, w); running averages
    with the configured momentum are used at inference.
    """

    def __init__(self, name, features, momentum=0.9, eps=1e-5, dtype=np.float64):
        super().__init__(name, dtype)
        self.features, self.momentum, self.eps = features, momentum, eps
        self.params["gamma"] = np.ones(features, dtype=self.dtype)
        self.params["beta"] = np.zeros(features, dtype=self.dtype)
        self.running_mean = np.zeros(features, dtype=np.float64)
        self.running_var = np.ones(features, dtype=np.float64)
        self.zero_grads()

    def _to2d(self, x):
        if x.ndim == 2:
            return x, None
        if x.ndim == 4:
            b, c, h, w = x.shape
            return x.transpose(0, 2, 3, 1).reshape(-1, c), (b, c, h, w)
        raise ShapeError(f"{self.name}: expected 2-d or 4-d input, got {x.shape}")

    def forward(self, x, train=True):
        x2, orig = self._to2d(x)
        if x2.shape[1] != self.features:
            raise ShapeError(
                f"{self.name}: expected {self.features} features, got {x2.shape[1]}"
            )
        if train:
            mu = x2.mean(axis=0)
            var = x2.var(axis=0)
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mu
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
        else:
            mu, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x2 - mu) * inv_std
        y2 = self.params["gamma"] * xhat + self.params["beta"]
        self._cache = (xhat, inv_std, orig, train)
        return y2 if orig is None else y2.reshape(orig[0], orig[2], orig[3], orig[1]).transpose(0, 3, 1, 2)

    def backward(self, dy):
        xhat, inv_std, orig, train = self._take_cache()
        dy2 = dy if orig is None else dy.transpose(0, 2, 3, 1).reshape(-1, orig[1])
        self.grads["gamma"] += (dy2 * xhat).sum(axis=0)
        self.grads["beta"] += dy2.sum(axis=0)
        g = dy2 * self.params["gamma"]
        if train:
            n = dy2.shape[0]
            dx2 = inv_std * (g - g.mean(axis=0) - xhat * (g * xhat).sum(axis=0) / n)
        else:
            dx2 = g * inv_std
        return dx2 if orig is None else dx2.reshape(orig[0], orig[2], orig[3], orig[1]).transpose(0, 3, 1, 2)


class LSTM(Layer):
    """Single LSTM layer over a (time, batch, input) sequence.

    Gate order i, f, g, o.  Input-to-hidden and hidden-to-hidden matrices form
    one quantization group.  With `stateful` set, the final (h, c) carries over
    to the next forward call (truncated BPTT: gradients stop at chunk edges).
    """

    def __init__(self, name, input_size, hidden_size, rng, stateful=False, dtype=np.float64):
        super().__init__(name, dtype)
        self.input_size, self.hidden_size = input_size, hidden_size
        self.stateful = stateful
        h = hidden_size
        self.params["Wx"] = uniform_fan_init(rng, (input_size, 4 * h), input_size, h, self.dtype)
        self.params["Wh"] = uniform_fan_init(rng, (h, 4 * h), h, h, self.dtype)
        b = np.zeros(4 * h, dtype=self.dtype)
        b[h : 2 * h] = 1.0  # forget-gate bias
        self.params["b"] = b
        self.quantizable = frozenset({"Wx", "Wh"})
        self._state = None
        self.zero_grads()

    def quant_groups(self):
        return [["Wx", "Wh"]]

    def reset_state(self):
        self._state = None

    def forward(self, x, train=True):
        if x.ndim != 3 or x.shape[2] != self.input_size:
            raise ShapeError(
                f"{self.name}: expected input (time, batch, {self.input_size}), got {x.shape}"
            )
        t_len, bsz, _ = x.shape
        hsz = self.hidden_size
        if self.stateful and self._state is not None and self._state[0].shape[0] == bsz:
            h_prev, c_prev = self._state
        else:
            h_prev = np.zeros((bsz, hsz), dtype=self.dtype)
            c_prev = np.zeros((bsz, hsz), dtype=self.dtype)
        hs = np.empty((t_len, bsz, hsz), dtype=self.dtype)
        steps = []
        for t in range(t_len):
            z = x[t] @ self.params["Wx"] + h_prev @ self.params["Wh"] + self.params["b"]
            i = 1.0 / (1.0 + np.exp(-z[:, :hsz]))
            f = 1.0 / (1.0 + np.exp(-z[:, hsz : 2 * hsz]))
            g = np.tanh(z[:, 2 * hsz : 3 * hsz])
            o = 1.0 / (1.0 + np.exp(-z[:, 3 * hsz :]))
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            steps.append((x[t], h_prev, c_prev, i, f, g, o, tc))
            hs[t] = h
            h_prev, c_prev = h, c
        if self.stateful:
            self._state = (h_prev.copy(), c_prev.copy())
        self._cache = steps
        return hs

    def backward(self, dy):
        steps = self._take_cache()
        hsz = self.hidden_size
        dx = np.empty((len(steps), dy.shape[1], self.input_size), dtype=self.dtype)
        dh_next = np.zeros((dy.shape[1], hsz), dtype=self.dtype)
        dc_next = np.zeros_like(dh_next)
        for t in reversed(range(len(steps))):
            xt, h_prev, c_prev, i, f, g, o, tc = steps[t]
            dh = dy[t] + dh_next
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_next
            di = dc * g
            df = dc * c_prev
            dg = dc * i
            dc_next = dc * f
            dz = np.concatenate(
                [
                    di * i * (1.0 - i),
                    df * f * (1.0 - f),
                    dg * (1.0 - g * g),
                    do * o * (1.0 - o),
                ],
                axis=1,
            )
            self.grads["Wx"] += xt.T @ dz
            self.grads["Wh"] += h_prev.T @ dz
            self.grads["b"] += dz.sum(axis=0)
            dh_next = dz @ self.params["Wh"].T
            dx[t] = dz @ self.params["Wx"].T
        return dx
