"""Minimal convolutional layers with explicit forward/backward passes.

Arrays are NHWC.  Layers cache what their backward pass needs; backward
accumulates parameter gradients (call zero_grad between steps) and returns
the gradient w.r.t. the layer input.  Convolutions route through im2col so
the heavy lifting is a BLAS matmul.
"""

import numpy as np

from edgedrift import _kernels
from edgedrift.errors import ContractViolation


def _im2col(x, k):
    B, H, W, C = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W, k * k * C)
    return np.ascontiguousarray(cols)


class Conv2D:
    """Same-padding 2-D convolution (cross-correlation), odd kernel size."""

    def __init__(self, in_ch, out_ch, ksize, rng=None, zero_init=False, dtype=np.float32):
        if ksize % 2 == 0 or ksize < 1:
            raise ContractViolation(f"kernel size must be odd, got {ksize}")
        shape = (ksize, ksize, in_ch, out_ch)
        if zero_init:
            self.w = np.zeros(shape, dtype=dtype)
        else:
            if rng is None:
                raise ContractViolation("non-zero init needs an rng")
            std = np.sqrt(2.0 / (ksize * ksize * in_ch))
            self.w = rng.normal(0.0, std, shape).astype(dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self.ksize = ksize
        self._x = None

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != self.w.shape[2]:
            raise ContractViolation(
                f"expected (B, H, W, {self.w.shape[2]}) input, got {x.shape}"
            )
        self._x = x
        B, H, W, _ = x.shape
        cols = _im2col(x, self.ksize)
        y = cols @ self.w.reshape(-1, self.w.shape[3]) + self.b
        return y.reshape(B, H, W, -1)

    def backward(self, gy):
        x = self._x
        B, H, W, C = x.shape
        k, out_ch = self.ksize, self.w.shape[3]
        gy2 = gy.reshape(B * H * W, out_ch)
        cols = _im2col(x, k)  # recomputed: cheaper than holding it across layers
        self.gw += (cols.T @ gy2).reshape(self.w.shape)
        self.gb += gy2.sum(axis=0)
        gcols = (gy2 @ self.w.reshape(-1, out_ch).T).reshape(B, H, W, k, k, C)
        p = k // 2
        gxp = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=gy.dtype)
        for ki in range(k):
            for kj in range(k):
                gxp[:, ki : ki + H, kj : kj + W, :] += gcols[:, :, :, ki, kj, :]
        return gxp[:, p : p + H, p : p + W, :]

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.gw, "b": self.gb}

    def zero_grad(self):
        self.gw[:] = 0
        self.gb[:] = 0


class ReLU:
    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, gy):
        return np.where(self._mask, gy, gy.dtype.type(0))


class Sigmoid:
    def forward(self, x):
        # split by sign for float stability
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self._out = out
        return out

    def backward(self, gy):
        return gy * self._out * (1.0 - self._out)


class AvgPool2:
    """2x2 average pooling, stride 2.  Needs even spatial dims."""

    def forward(self, x):
        B, H, W, C = x.shape
        if H % 2 or W % 2:
            raise ContractViolation(f"avg pool needs even dims, got {H}x{W}")
        self._shape = x.shape
        return x.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))

    def backward(self, gy):
        B, H, W, C = self._shape
        g = np.broadcast_to(
            gy[:, :, None, :, None, :] * gy.dtype.type(0.25), (B, H // 2, 2, W // 2, 2, C)
        )
        return g.reshape(B, H, W, C)


class Upsample2:
    """Bilinear 2x upsampling expressed as a fixed gather warp.

    Output pixel (i, j) reads ((i + 0.5) / 2 - 0.5, (j + 0.5) / 2 - 0.5),
    clamped at the border; the backward pass is the warp's exact adjoint.
    """

    def __init__(self):
        self._fields = {}

    def _field(self, h2, w2, dtype):
        key = (h2, w2, dtype)
        if key not in self._fields:
            ii = np.arange(h2, dtype=dtype)[:, None]
            jj = np.arange(w2, dtype=dtype)[None, :]
            di = (ii + dtype.type(0.5)) / 2 - dtype.type(0.5) - ii
            dj = (jj + dtype.type(0.5)) / 2 - dtype.type(0.5) - jj
            self._fields[key] = (
                np.ascontiguousarray(np.broadcast_to(di, (h2, w2))),
                np.ascontiguousarray(np.broadcast_to(dj, (h2, w2))),
            )
        return self._fields[key]

    def forward(self, x):
        B, H, W, C = x.shape
        self._in_shape = x.shape
        di, dj = self._field(2 * H, 2 * W, x.dtype)
        out = np.empty((B, 2 * H, 2 * W, C), dtype=x.dtype)
        for b in range(B):
            out[b] = _kernels.bilinear_forward(np.ascontiguousarray(x[b]), di, dj)
        return out

    def backward(self, gy):
        B, H, W, C = self._in_shape
        di, dj = self._field(2 * H, 2 * W, gy.dtype)
        zero = np.zeros((H, W, C), dtype=gy.dtype)
        gx = np.empty((B, H, W, C), dtype=gy.dtype)
        for b in range(B):
            gv, _, _ = _kernels.bilinear_vjp(zero, di, dj, np.ascontiguousarray(gy[b]))
            gx[b] = gv
        return gx


class SGD:
    """Plain SGD with momentum over a flat dict of parameter arrays."""

    def __init__(self, params, lr, momentum=0.9):
        self.params = params
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._v = {k: np.zeros_like(p) for k, p in params.items()}

    def step(self, grads):
        if set(grads) != set(self.params):
            raise ContractViolation("gradient keys do not match parameter keys")
        for k, p in self.params.items():
            v = self._v[k]
            v *= self.momentum
            v -= self.lr * grads[k]
            p += v


def grads_finite(grads):
    """True when every gradient array is finite."""
    return all(np.isfinite(g).all() for g in grads.values())
