"""Network building blocks with analytic gradients, numpy only.

Every layer caches what its backward pass needs during forward and
accumulates parameter gradients into `.grads` (same keys as `.params`).
Convolution uses im2col so the heavy lifting happens inside matmul.
"""

from __future__ import annotations

from typing import Dict, Optional, Tuple

import numpy as np


def im2col(
    x: np.ndarray, k: int, stride: int
) -> Tuple[np.ndarray, int, int]:
    """Unfold (N, C, H, W) into (N, Ho*Wo, C*k*k) patch rows."""
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    sn, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, ho, wo, k, k),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    cols = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n, ho * wo, c * k * k
    )
    return cols, ho, wo


def col2im(
    dcols: np.ndarray,
    x_shape: Tuple[int, int, int, int],
    k: int,
    stride: int,
    ho: int,
    wo: int,
) -> np.ndarray:
    """Scatter-add the im2col gradient back onto the input layout."""
    n, c, h, w = x_shape
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    d6 = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d6[
                :, :, :, :, i, j
            ]
    return dx


class Layer:
    """Base: parameterless layers only override forward/backward."""

    def __init__(self) -> None:
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.state: Dict[str, np.ndarray] = {}  # non-trainable (BN running stats)

    def zero_grads(self) -> None:
        for key, p in self.params.items():
            self.grads[key] = np.zeros_like(p)

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2d(Layer):
    """Valid-padding 2-D convolution, weight shape (Cout, Cin, k, k)."""

    def __init__(
        self, c_in: int, c_out: int, k: int, stride: int,
        rng: np.random.Generator, dtype: np.dtype,
    ) -> None:
        super().__init__()
        self.k = k
        self.stride = stride
        fan_in = c_in * k * k
        self.params["W"] = (
            rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / fan_in)
        ).astype(dtype)
        self.params["b"] = np.zeros(c_out, dtype=dtype)
        self.zero_grads()
        self._cache = None

    def out_hw(self, h: int, w: int) -> Tuple[int, int]:
        return (h - self.k) // self.stride + 1, (w - self.k) // self.stride + 1

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        cols, ho, wo = im2col(x, self.k, self.stride)
        w_mat = self.params["W"].reshape(self.params["W"].shape[0], -1)
        out = cols @ w_mat.T + self.params["b"]
        self._cache = (cols, x.shape, ho, wo)
        return out.transpose(0, 2, 1).reshape(x.shape[0], -1, ho, wo)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        cols, x_shape, ho, wo = self._cache
        n, c_out = dout.shape[0], dout.shape[1]
        dmat = dout.reshape(n, c_out, ho * wo).transpose(0, 2, 1)
        w_mat = self.params["W"].reshape(c_out, -1)
        self.grads["W"] += np.tensordot(dmat, cols, axes=([0, 1], [0, 1])).reshape(
            self.params["W"].shape
        )
        self.grads["b"] += dmat.sum(axis=(0, 1))
        dcols = dmat @ w_mat
        return col2im(dcols, x_shape, self.k, self.stride, ho, wo)


class BatchNorm2d(Layer):
    """Per-channel batch normalization over (N, H, W)."""

    def __init__(self, channels: int, dtype: np.dtype, momentum: float = 0.9,
                 eps: float = 1e-5) -> None:
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.state["running_mean"] = np.zeros(channels, dtype=dtype)
        self.state["running_var"] = np.ones(channels, dtype=dtype)
        self.zero_grads()
        self._cache = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.state["running_mean"] = (
                self.momentum * self.state["running_mean"]
                + (1 - self.momentum) * mean
            )
            self.state["running_var"] = (
                self.momentum * self.state["running_var"]
                + (1 - self.momentum) * var
            )
        else:
            mean = self.state["running_mean"]
            var = self.state["running_var"]
        ivar = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * ivar[None, :, None, None]
        self._cache = (xhat, ivar, train)
        return gamma * xhat + beta

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xhat, ivar, train = self._cache
        self.grads["gamma"] += (dout * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] += dout.sum(axis=(0, 2, 3))
        gamma = self.params["gamma"][None, :, None, None]
        dxhat = dout * gamma
        ivar4 = ivar[None, :, None, None]
        if not train:
            return dxhat * ivar4
        m = dout.shape[0] * dout.shape[2] * dout.shape[3]
        sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return (ivar4 / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)


class ReLU(Layer):
    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout * self._mask


class Dropout(Layer):
    """Inverted dropout; draws its mask from the generator it is given."""

    def __init__(self, rate: float, rng: np.random.Generator) -> None:
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng
        self._mask: Optional[np.ndarray] = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (self.rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * self._mask

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._mask is None:
            return dout
        return dout * self._mask


class Linear(Layer):
    """Fully connected layer, weight shape (out, in)."""

    def __init__(
        self, d_in: int, d_out: int, rng: np.random.Generator,
        dtype: np.dtype, weight_scale: Optional[float] = None,
    ) -> None:
        super().__init__()
        scale = weight_scale if weight_scale is not None else np.sqrt(2.0 / d_in)
        self.params["W"] = (
            rng.standard_normal((d_out, d_in)) * scale
        ).astype(dtype)
        self.params["b"] = np.zeros(d_out, dtype=dtype)
        self.zero_grads()

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        self._x = x
        return x @ self.params["W"].T + self.params["b"]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        self.grads["W"] += dout.T @ self._x
        self.grads["b"] += dout.sum(axis=0)
        return dout @ self.params["W"]


class Tanh(Layer):
    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        self._out = np.tanh(x)
        return self._out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout * (1.0 - self._out**2)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class LSTM(Layer):
    """Stacked LSTM over a full sequence, input (N, S, D) -> (N, S, H).

    Gate layout in the fused weight matrices is [input, forget, cell, output].
    The forget-gate bias starts at 1 so early training does not flush state.
    """

    def __init__(
        self, d_in: int, hidden: int, n_layers: int,
        rng: np.random.Generator, dtype: np.dtype,
    ) -> None:
        super().__init__()
        self.hidden = hidden
        self.n_layers = n_layers
        bound = 1.0 / np.sqrt(hidden)
        for layer in range(n_layers):
            d = d_in if layer == 0 else hidden
            self.params[f"l{layer}.Wx"] = rng.uniform(
                -bound, bound, size=(4 * hidden, d)
            ).astype(dtype)
            self.params[f"l{layer}.Wh"] = rng.uniform(
                -bound, bound, size=(4 * hidden, hidden)
            ).astype(dtype)
            bias = rng.uniform(-bound, bound, size=4 * hidden).astype(dtype)
            bias[hidden : 2 * hidden] += 1.0
            self.params[f"l{layer}.b"] = bias
        self.zero_grads()

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        n, s, _ = x.shape
        h_dim = self.hidden
        self._caches = []
        self._in_shape = x.shape
        current = x
        for layer in range(self.n_layers):
            wx = self.params[f"l{layer}.Wx"]
            wh = self.params[f"l{layer}.Wh"]
            b = self.params[f"l{layer}.b"]
            h = np.zeros((n, h_dim), dtype=x.dtype)
            c = np.zeros((n, h_dim), dtype=x.dtype)
            outputs = np.empty((n, s, h_dim), dtype=x.dtype)
            steps = []
            for t in range(s):
                xt = current[:, t, :]
                z = xt @ wx.T + h @ wh.T + b
                i = _sigmoid(z[:, :h_dim])
                f = _sigmoid(z[:, h_dim : 2 * h_dim])
                g = np.tanh(z[:, 2 * h_dim : 3 * h_dim])
                o = _sigmoid(z[:, 3 * h_dim :])
                c_next = f * c + i * g
                tanh_c = np.tanh(c_next)
                h_next = o * tanh_c
                steps.append((xt, h, c, i, f, g, o, tanh_c))
                h, c = h_next, c_next
                outputs[:, t, :] = h
            self._caches.append(steps)
            current = outputs
        return current

    def backward(self, dout: np.ndarray) -> np.ndarray:
        n, s, _ = dout.shape
        h_dim = self.hidden
        dcurrent = dout
        for layer in range(self.n_layers - 1, -1, -1):
            wx = self.params[f"l{layer}.Wx"]
            wh = self.params[f"l{layer}.Wh"]
            steps = self._caches[layer]
            d_in = wx.shape[1]
            dx_seq = np.empty((n, s, d_in), dtype=dout.dtype)
            dh_next = np.zeros((n, h_dim), dtype=dout.dtype)
            dc_next = np.zeros((n, h_dim), dtype=dout.dtype)
            d_wx = self.grads[f"l{layer}.Wx"]
            d_wh = self.grads[f"l{layer}.Wh"]
            d_b = self.grads[f"l{layer}.b"]
            for t in range(s - 1, -1, -1):
                xt, h_prev, c_prev, i, f, g, o, tanh_c = steps[t]
                dh = dcurrent[:, t, :] + dh_next
                do = dh * tanh_c
                dc = dc_next + dh * o * (1.0 - tanh_c**2)
                di = dc * g
                df = dc * c_prev
                dg = dc * i
                dc_next = dc * f
                dz = np.concatenate(
                    [
                        di * i * (1.0 - i),
                        df * f * (1.0 - f),
                        dg * (1.0 - g**2),
                        do * o * (1.0 - o),
                    ],
                    axis=1,
                )
                d_wx += dz.T @ xt
                d_wh += dz.T @ h_prev
                d_b += dz.sum(axis=0)
                dx_seq[:, t, :] = dz @ wx
                dh_next = dz @ wh
            dcurrent = dx_seq
        return dcurrent
