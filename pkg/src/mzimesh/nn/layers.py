"""Minimal reverse-mode layers: dense, tanh, reshape and 1-D transposed convolution.

All parameters of a :class:`Sequential` live in one flat float64 buffer; each
layer's arrays are views into it, so an optimiser can work on the flat vector
directly.
"""

from __future__ import annotations

import numpy as np


class Layer:
    param_shapes: tuple = ()

    def bind(self, params, grads):
        """Attach parameter/gradient views (one per entry of ``param_shapes``)."""
        self.params = params
        self.grads = grads

    def init(self, rng, scale=1.0):
        pass

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def out_shape(self, in_shape):
        return in_shape

    def config(self) -> dict:
        return {"type": type(self).__name__}


class Dense(Layer):
    """y = x W^T + b, W of shape (n_out, n_in)."""

    def __init__(self, n_in, n_out):
        self.n_in, self.n_out = n_in, n_out
        self.param_shapes = ((n_out, n_in), (n_out,))

    def init(self, rng, scale=1.0):
        lim = scale * np.sqrt(6.0 / (self.n_in + self.n_out))
        self.params[0][...] = rng.uniform(-lim, lim, (self.n_out, self.n_in))
        self.params[1][...] = 0.0

    def forward(self, x):
        self.x = x
        W, b = self.params
        return x @ W.T + b

    def backward(self, dy):
        W, _ = self.params
        self.grads[0][...] += dy.T @ self.x
        self.grads[1][...] += dy.sum(axis=0)
        return dy @ W

    def out_shape(self, in_shape):
        return (self.n_out,)

    def config(self):
        return {"type": "Dense", "n_in": self.n_in, "n_out": self.n_out}


class Tanh(Layer):
    def forward(self, x):
        self.y = np.tanh(x)
        return self.y

    def backward(self, dy):
        return dy * (1.0 - self.y * self.y)


class Reshape(Layer):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, x):
        self.in_shape = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, dy):
        return dy.reshape(self.in_shape)

    def out_shape(self, in_shape):
        return self.shape

    def config(self):
        return {"type": "Reshape", "shape": list(self.shape)}


class ConvTranspose1d(Layer):
    """Transposed 1-D convolution without padding, optionally cropped.

    Input (N, c_in, L) maps to (N, c_out, (L - 1) * stride + kernel) before
    ``crop`` samples are removed from each end.
    """

    def __init__(self, c_in, c_out, kernel, stride=1, crop=(0, 0)):
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        self.crop = tuple(crop)
        self.param_shapes = ((c_in, c_out, kernel), (c_out,))

    @staticmethod
    def full_length(length, kernel, stride):
        return (length - 1) * stride + kernel

    def init(self, rng, scale=1.0):
        fan_in = self.c_in * self.kernel
        fan_out = self.c_out * self.kernel
        lim = scale * np.sqrt(6.0 / (fan_in + fan_out))
        self.params[0][...] = rng.uniform(-lim, lim, self.param_shapes[0])
        self.params[1][...] = 0.0

    def _taps(self, L):
        """Output position of input sample l under kernel tap j, shape (L, kernel)."""
        return np.arange(L)[:, None] * self.stride + np.arange(self.kernel)[None, :]

    def forward(self, x):
        w, b = self.params
        n, c, L = x.shape
        self.xt = x.transpose(0, 2, 1).reshape(n * L, c)
        full = self.full_length(L, self.kernel, self.stride)
        # every (sample, tap) contribution in one product, then scatter-add along length
        contrib = (self.xt @ w.reshape(c, -1)).reshape(n, L, self.c_out, self.kernel)
        y = np.zeros((n, full, self.c_out))
        for j in range(self.kernel):
            y[:, j : j + (L - 1) * self.stride + 1 : self.stride] += contrib[..., j]
        y += b
        lo, hi = self.crop
        self.in_shape = x.shape
        return y[:, lo : full - hi].transpose(0, 2, 1)

    def backward(self, dy):
        w, _ = self.params
        n, c, L = self.in_shape
        full = self.full_length(L, self.kernel, self.stride)
        lo, hi = self.crop
        dfull = np.zeros((n, full, self.c_out))
        dfull[:, lo : full - hi] = dy.transpose(0, 2, 1)
        D = dfull[:, self._taps(L)]  # (n, L, kernel, c_out)
        D = D.transpose(0, 1, 3, 2).reshape(n * L, self.c_out * self.kernel)
        self.grads[0][...] += (self.xt.T @ D).reshape(w.shape)
        self.grads[1][...] += dfull.sum(axis=(0, 1))
        return (D @ w.reshape(c, -1).T).reshape(n, L, c).transpose(0, 2, 1)

    def out_shape(self, in_shape):
        c, L = in_shape
        return (self.c_out, self.full_length(L, self.kernel, self.stride) - sum(self.crop))

    def config(self):
        return {"type": "ConvTranspose1d", "c_in": self.c_in, "c_out": self.c_out, "kernel": self.kernel,
                "stride": self.stride, "crop": list(self.crop)}


_LAYER_TYPES = {"Dense": Dense, "Tanh": Tanh, "Reshape": Reshape, "ConvTranspose1d": ConvTranspose1d}


def layer_from_config(cfg: dict) -> Layer:
    cfg = dict(cfg)
    cls = _LAYER_TYPES[cfg.pop("type")]
    return cls(**cfg)


class Sequential:
    """Chain of layers sharing one flat parameter vector (row-major, layer order)."""

    def __init__(self, layers, in_shape):
        self.layers = list(layers)
        self.in_shape = tuple(in_shape)
        sizes = [int(np.prod(s)) for layer in self.layers for s in layer.param_shapes]
        self.flat = np.zeros(sum(sizes))
        self.grad = np.zeros_like(self.flat)
        o = 0
        for layer in self.layers:
            ps, gs = [], []
            for s in layer.param_shapes:
                k = int(np.prod(s))
                ps.append(self.flat[o : o + k].reshape(s))
                gs.append(self.grad[o : o + k].reshape(s))
                o += k
            layer.bind(ps, gs)
        shape = self.in_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        self.out_shape = shape

    @property
    def n_params(self) -> int:
        return self.flat.size

    def init(self, rng, scale=1.0):
        for layer in self.layers:
            layer.init(rng, scale)

    def set_params(self, x):
        self.flat[...] = x

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        """Accumulate parameter gradients into ``self.grad`` and return d/dinput."""
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def zero_grad(self):
        self.grad[...] = 0.0

    def config(self) -> dict:
        return {"in_shape": list(self.in_shape), "layers": [layer.config() for layer in self.layers]}

    @classmethod
    def from_config(cls, cfg: dict) -> "Sequential":
        return cls([layer_from_config(c) for c in cfg["layers"]], cfg["in_shape"])
