"""Minimal numpy layer stack with hand-written backward passes.

Just enough machinery for the toy encoder-decoder: 2-D convolution via
im2col, ReLU, nearest-neighbor upsampling, a sequential container, and Adam.
Forward passes cache what backward needs, so a layer instance supports one
in-flight forward at a time.

The stack runs in ``DTYPE`` (float32 by default: the im2col workspaces are
memory-bound and the toy nets do not need more); score-level math elsewhere
in the package stays float64.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float32


class Param:
    __slots__ = ("name", "value", "grad")

    def __init__(self, value: np.ndarray, name: str):
        self.name = name
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)


class Layer:
    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list[Param]:
        return []


class Conv2d(Layer):
    """Same-convolution (odd kernel) or strided convolution, NCHW layout."""

    def __init__(self, cin: int, cout: int, ksize: int = 3, stride: int = 1,
                 bias: bool = True, rng: np.random.Generator | None = None,
                 name: str = "conv"):
        rng = rng or np.random.default_rng(0)
        scale = np.sqrt(2.0 / (cin * ksize * ksize))  # He init
        self.weight = Param(rng.standard_normal((cout, cin, ksize, ksize)) * scale,
                            f"{name}.weight")
        self.bias = Param(np.zeros(cout), f"{name}.bias") if bias else None
        self.ksize = ksize
        self.stride = stride
        self.pad = (ksize - 1) // 2
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.weight.value.dtype)
        B, C, H, W = x.shape
        k, s, p = self.ksize, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        windows = windows[:, :, ::s, ::s]
        Ho, Wo = windows.shape[2], windows.shape[3]
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
        w2 = self.weight.value.reshape(self.weight.value.shape[0], -1)
        out = cols @ w2.T
        if self.bias is not None:
            out += self.bias.value
        self._cache = (cols, x.shape, (Ho, Wo))
        return out.reshape(B, Ho, Wo, -1).transpose(0, 3, 1, 2)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        cols, x_shape, (Ho, Wo) = self._cache
        B, C, H, W = x_shape
        k, s, p = self.ksize, self.stride, self.pad
        cout = dout.shape[1]
        dout2 = np.ascontiguousarray(
            dout.transpose(0, 2, 3, 1), dtype=self.weight.value.dtype).reshape(-1, cout)
        self.weight.grad += (dout2.T @ cols).reshape(self.weight.value.shape)
        if self.bias is not None:
            self.bias.grad += dout2.sum(axis=0)
        dcols = (dout2 @ self.weight.value.reshape(cout, -1))
        dcols = dcols.reshape(B, Ho, Wo, C, k, k).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=self.weight.value.dtype)
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki:ki + s * Ho:s, kj:kj + s * Wo:s] += dcols[:, :, :, :, ki, kj]
        return dxp[:, :, p:p + H, p:p + W] if p else dxp

    def params(self) -> list[Param]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class ReLU(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dout, 0.0)


class Upsample2x(Layer):
    """Nearest-neighbor x2 upsampling."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        B, C, H, W = dout.shape
        return dout.reshape(B, C, H // 2, 2, W // 2, 2).sum(axis=(3, 5))


class Sequential(Layer):
    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]


class Adam:
    """Adaptive-moment optimizer over a fixed parameter list."""

    def __init__(self, params: list[Param], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0.0

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad ** 2
            p.value -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
