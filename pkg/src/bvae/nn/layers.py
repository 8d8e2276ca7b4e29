"""Differentiable layers with explicit forward/backward passes.

All tensors are numpy arrays; images use NHWC layout.  Convolutions run
through im2col patch expansion feeding a single BLAS matmul; "same" padding
with stride s produces output extent ceil(in/s) and puts the extra pad on
the bottom/right so 28 -> 14 -> 7 composes.  Transposed convolution is the
exact adjoint of the convolution with the same geometry.

Layers keep their parameters in ``self.params`` and, after backward(), the
matching gradients in ``self.grads``.  Everything is dtype-preserving so
the same code runs the float32 training path and the float64 gradient
checks.
"""

import numpy as np

from ..errors import ConfigError, ShapeError, UsageError

DEFAULT_DTYPE = np.float32

# cap on the im2col scratch buffer; conv ops slice the batch to stay under it
_COL_BYTES_LIMIT = 64 * 1024 * 1024

ACTIVATIONS = ("relu", "sigmoid", "softmax", "linear")


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=DEFAULT_DTYPE):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def activation(kind, x):
    """Elementwise relu/sigmoid/linear; softmax over the last axis."""
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    if kind == "softmax":
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    if kind == "linear":
        return x
    raise ConfigError(f"unknown activation kind {kind!r}")


def _same_pads(size, k, stride):
    """Output extent and (before, after) padding for 'same' convolution."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    before = total // 2
    return out, before, total - before


def _batch_slices(n, per_item_bytes):
    step = max(1, int(_COL_BYTES_LIMIT // max(per_item_bytes, 1)))
    for lo in range(0, n, step):
        yield lo, min(lo + step, n)


def _im2col(x_pad, k, stride, out_h, out_w):
    """Patch matrix [B*out_h*out_w, k*k*C] from a padded NHWC block."""
    b, _, _, c = x_pad.shape
    sb, sh, sw, sc = x_pad.strides
    view = np.lib.stride_tricks.as_strided(
        x_pad,
        shape=(b, out_h, out_w, k, k, c),
        strides=(sb, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return view.reshape(b * out_h * out_w, k * k * c)


def _col2im_add(cols, acc, k, stride, out_h, out_w):
    """Scatter-add patch gradients back onto the padded accumulator."""
    b = acc.shape[0]
    c = acc.shape[3]
    six = cols.reshape(b, out_h, out_w, k, k, c)
    for i in range(k):
        for j in range(k):
            acc[:, i:i + out_h * stride:stride, j:j + out_w * stride:stride, :] += six[:, :, :, i, j, :]


class Layer:
    """Base: forward caches what backward needs; backward fills self.grads."""

    name = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise UsageError(f"{self.name}: backward called without a matching forward")
        return self._cache

    def param_items(self):
        return [(name, arr) for name, arr in self.params.items()]


class Dense(Layer):
    def __init__(self, in_dim, out_dim, rng, name="dense", dtype=DEFAULT_DTYPE):
        super().__init__()
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.params = {
            "W": glorot_uniform(rng, (in_dim, out_dim), in_dim, out_dim, dtype),
            "b": np.zeros(out_dim, dtype=dtype),
        }

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"{self.name}: expected (B, {self.in_dim}), got {x.shape}")
        self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad_out):
        x = self._take_cache()
        self.grads = {"W": x.T @ grad_out, "b": grad_out.sum(axis=0)}
        return grad_out @ self.params["W"].T


class Conv2D(Layer):
    """3x3-style cross-correlation, NHWC, kernels [k, k, C_in, C_out]."""

    def __init__(self, in_channels, out_channels, rng, kernel_size=3, stride=1,
                 name="conv2d", dtype=DEFAULT_DTYPE):
        super().__init__()
        if stride not in (1, 2):
            raise ConfigError(f"{name}: stride must be 1 or 2, got {stride}")
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = kernel_size
        self.stride = stride
        fan_in = kernel_size * kernel_size * in_channels
        fan_out = kernel_size * kernel_size * out_channels
        self.params = {
            "W": glorot_uniform(rng, (kernel_size, kernel_size, in_channels, out_channels),
                                fan_in, fan_out, dtype),
            "b": np.zeros(out_channels, dtype=dtype),
        }

    def _geometry(self, h, w):
        out_h, pt, pb = _same_pads(h, self.k, self.stride)
        out_w, pl, pr = _same_pads(w, self.k, self.stride)
        return out_h, out_w, (pt, pb), (pl, pr)

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ShapeError(f"{self.name}: expected (B, H, W, {self.in_channels}), got {x.shape}")
        b, h, w, _ = x.shape
        out_h, out_w, (pt, pb), (pl, pr) = self._geometry(h, w)
        x_pad = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        self._cache = (x.shape, x_pad)
        w_mat = self.params["W"].reshape(-1, self.out_channels)
        out = np.empty((b, out_h, out_w, self.out_channels), dtype=x.dtype)
        per_item = out_h * out_w * self.k * self.k * self.in_channels * x.itemsize
        for lo, hi in _batch_slices(b, per_item):
            cols = _im2col(x_pad[lo:hi], self.k, self.stride, out_h, out_w)
            out[lo:hi] = (cols @ w_mat + self.params["b"]).reshape(hi - lo, out_h, out_w, -1)
        return out

    def backward(self, grad_out):
        x_shape, x_pad = self._take_cache()
        b, h, w, _ = x_shape
        out_h, out_w, (pt, pb), (pl, pr) = self._geometry(h, w)
        w_mat = self.params["W"].reshape(-1, self.out_channels)
        d_w = np.zeros_like(w_mat, dtype=x_pad.dtype)
        dx_pad = np.zeros_like(x_pad)
        per_item = out_h * out_w * self.k * self.k * self.in_channels * x_pad.itemsize
        for lo, hi in _batch_slices(b, per_item):
            g2 = grad_out[lo:hi].reshape(-1, self.out_channels)
            cols = _im2col(x_pad[lo:hi], self.k, self.stride, out_h, out_w)
            d_w += cols.T @ g2
            d_cols = g2 @ w_mat.T
            _col2im_add(d_cols, dx_pad[lo:hi], self.k, self.stride, out_h, out_w)
        self.grads = {
            "W": d_w.reshape(self.params["W"].shape),
            "b": grad_out.sum(axis=(0, 1, 2)),
        }
        return dx_pad[:, pt:pt + h, pl:pl + w, :]


class ConvTranspose2D(Layer):
    """Adjoint of Conv2D with the same geometry; stride-2 maps 7->14->28.

    Kernels are stored conv-style as [k, k, C_out, C_in]: the layer maps a
    (B, h, w, C_in) input onto the (B, h*s, w*s, C_out) grid a Conv2D with
    those kernels would contract back down.
    """

    def __init__(self, in_channels, out_channels, rng, kernel_size=3, stride=2,
                 name="conv2d_transpose", dtype=DEFAULT_DTYPE):
        super().__init__()
        if stride not in (1, 2):
            raise ConfigError(f"{name}: stride must be 1 or 2, got {stride}")
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = kernel_size
        self.stride = stride
        fan_in = kernel_size * kernel_size * in_channels
        fan_out = kernel_size * kernel_size * out_channels
        self.params = {
            "W": glorot_uniform(rng, (kernel_size, kernel_size, out_channels, in_channels),
                                fan_in, fan_out, dtype),
            "b": np.zeros(out_channels, dtype=dtype),
        }

    def _geometry(self, h, w):
        # geometry of the conv this layer is the adjoint of
        big_h, big_w = h * self.stride, w * self.stride
        out_h, pt, pb = _same_pads(big_h, self.k, self.stride)
        out_w, pl, pr = _same_pads(big_w, self.k, self.stride)
        if out_h != h or out_w != w:
            raise ShapeError(f"{self.name}: no valid adjoint geometry for input {h}x{w}")
        return big_h, big_w, (pt, pb), (pl, pr)

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ShapeError(f"{self.name}: expected (B, h, w, {self.in_channels}), got {x.shape}")
        b, h, w, _ = x.shape
        big_h, big_w, (pt, pb), (pl, pr) = self._geometry(h, w)
        self._cache = x
        w_mat = self.params["W"].reshape(-1, self.in_channels)
        y_pad = np.zeros((b, big_h + pt + pb, big_w + pl + pr, self.out_channels), dtype=x.dtype)
        per_item = h * w * self.k * self.k * self.out_channels * x.itemsize
        for lo, hi in _batch_slices(b, per_item):
            x2 = x[lo:hi].reshape(-1, self.in_channels)
            d_cols = x2 @ w_mat.T
            _col2im_add(d_cols, y_pad[lo:hi], self.k, self.stride, h, w)
        return y_pad[:, pt:pt + big_h, pl:pl + big_w, :] + self.params["b"]

    def backward(self, grad_out):
        x = self._take_cache()
        b, h, w, _ = x.shape
        big_h, big_w, (pt, pb), (pl, pr) = self._geometry(h, w)
        if grad_out.shape != (b, big_h, big_w, self.out_channels):
            raise ShapeError(f"{self.name}: gradient shape {grad_out.shape} does not match output")
        g_pad = np.pad(grad_out, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        w_mat = self.params["W"].reshape(-1, self.in_channels)
        d_w = np.zeros_like(w_mat, dtype=x.dtype)
        dx = np.empty_like(x)
        per_item = h * w * self.k * self.k * self.out_channels * x.itemsize
        for lo, hi in _batch_slices(b, per_item):
            cols_g = _im2col(g_pad[lo:hi], self.k, self.stride, h, w)
            x2 = x[lo:hi].reshape(-1, self.in_channels)
            dx[lo:hi] = (cols_g @ w_mat).reshape(hi - lo, h, w, self.in_channels)
            d_w += cols_g.T @ x2
        self.grads = {
            "W": d_w.reshape(self.params["W"].shape),
            "b": grad_out.sum(axis=(0, 1, 2)),
        }
        return dx


class Activation(Layer):
    def __init__(self, kind, name=None):
        super().__init__()
        if kind not in ACTIVATIONS:
            raise ConfigError(f"unknown activation kind {kind!r}")
        self.kind = kind
        self.name = name or kind

    def forward(self, x):
        if self.kind == "relu":
            self._cache = x > 0
            return np.maximum(x, 0)
        out = activation(self.kind, x)
        self._cache = out if self.kind in ("sigmoid", "softmax") else True
        return out

    def backward(self, grad_out):
        cache = self._take_cache()
        if self.kind == "relu":
            return grad_out * cache
        if self.kind == "sigmoid":
            return grad_out * cache * (1.0 - cache)
        if self.kind == "softmax":
            s = cache
            inner = (grad_out * s).sum(axis=-1, keepdims=True)
            return s * (grad_out - inner)
        return grad_out


class Flatten(Layer):
    name = "flatten"

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._take_cache())


class Reshape(Layer):
    def __init__(self, target_shape, name="reshape"):
        super().__init__()
        self.name = name
        self.target_shape = tuple(target_shape)

    def forward(self, x):
        expected = int(np.prod(self.target_shape))
        if x.reshape(x.shape[0], -1).shape[1] != expected:
            raise ShapeError(f"{self.name}: cannot reshape {x.shape} to (B, {self.target_shape})")
        self._cache = x.shape
        return x.reshape((x.shape[0],) + self.target_shape)

    def backward(self, grad_out):
        return grad_out.reshape(self._take_cache())


class Sequential:
    """Plain layer chain; parameters are addressed as '<i>.<name>.<param>'."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def param_items(self, prefix=""):
        items = []
        for i, layer in enumerate(self.layers):
            for pname, arr in layer.params.items():
                items.append((f"{prefix}{i}.{layer.name}.{pname}", arr))
        return items

    def grad_items(self, prefix=""):
        items = []
        for i, layer in enumerate(self.layers):
            for pname in layer.params:
                items.append((f"{prefix}{i}.{layer.name}.{pname}", layer.grads[pname]))
        return items
