"""Reverse-mode autodiff over dense numpy buffers.

A small tape-based engine: every operation returns a new ``Tensor`` that
remembers its parents and a closure computing the local backward step.
``Tensor.backward()`` walks the recorded graph once in reverse topological
order and accumulates gradients into every node it visits, so intermediate
feature maps keep their gradients (needed for class-activation maps).

Float32 is the working precision; pass float64 tensors for gradient
checking, where central finite differences need the extra headroom.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

_FINITE_CHECKS = False


def set_finite_checks(enabled: bool) -> None:
    """Globally enable NaN/Inf detection on every op output (test mode)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


class Tensor:
    """Dense n-d array with an optional gradient slot.

    ``data`` is row-major float32 or float64. ``grad`` is lazily created
    during backward and always matches ``data``'s shape. Tensors are
    treated as immutable after construction except for gradient
    accumulation and explicit in-place parameter updates by the optimizer.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn", "_op", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._op = ""
        self._done = False
        if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in tensor {name or '<input>'}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        """Run reverse-mode accumulation from this tensor.

        ``grad`` seeds the output gradient (defaults to ones). May be
        called once per forward graph; a second call raises.
        """
        if self._done:
            raise RuntimeError("backward already called on this graph root")
        self._done = True
        if grad is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.broadcast_to(np.asarray(grad, dtype=self.data.dtype), self.data.shape).copy()

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.accumulate_grad(seed)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self._op or 'leaf'})"


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out._done = False
    out._op = op
    tracked = any(p.requires_grad or p._parents or p._backward_fn for p in parents)
    if tracked:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Inverse of numpy broadcasting: sum over stretched axes.
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    data = a.data + b.data

    def backward(g):
        a.accumulate_grad(_unbroadcast(g, a.shape).astype(a.data.dtype))
        b.accumulate_grad(_unbroadcast(g, b.shape).astype(b.data.dtype))

    return _result(data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    data = a.data * b.data

    def backward(g):
        a.accumulate_grad(_unbroadcast(g * b.data, a.shape).astype(a.data.dtype))
        b.accumulate_grad(_unbroadcast(g * a.data, b.shape).astype(b.data.dtype))

    return _result(data, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a.accumulate_grad(-g)

    return _result(-a.data, (a,), backward, "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    data = np.where(mask, a.data, 0)

    def backward(g):
        a.accumulate_grad(g * mask)

    return _result(data, (a,), backward, "relu")


def sigmoid(a: Tensor) -> Tensor:
    """Logistic g(x) = 1/(1+e^-x), overflow-safe on both tails."""
    x = a.data
    e = np.exp(-np.abs(x))
    data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        a.accumulate_grad(g * data * (1.0 - data))

    return _result(data, (a,), backward, "sigmoid")


def tensor_sum(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(g):
        a.accumulate_grad(np.broadcast_to(g, a.shape).astype(a.data.dtype).copy())

    return _result(data, (a,), backward, "sum")


def safe_log(a: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)); gradient is zero where the floor binds."""
    clamped = np.maximum(a.data, floor)
    active = a.data >= floor

    def backward(g):
        a.accumulate_grad(g * active / clamped)

    return _result(np.log(clamped), (a,), backward, "safe_log")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        a.accumulate_grad(g.reshape(a.shape))

    return _result(data, (a,), backward, "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (-1,))


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map W @ x + b for a 1-d input."""
    if x.data.ndim != 1 or weights.data.ndim != 2:
        raise DimensionError("dense expects 1-d input and 2-d weights")
    if weights.shape[1] != x.shape[0]:
        raise DimensionError(f"dense: weights {weights.shape} incompatible with input {x.shape}")
    if bias is not None and bias.shape != (weights.shape[0],):
        raise DimensionError(f"dense: bias {bias.shape} != ({weights.shape[0]},)")
    data = weights.data @ x.data
    if bias is not None:
        data = data + bias.data

    def backward(g):
        x.accumulate_grad((weights.data.T @ g).astype(x.data.dtype))
        weights.accumulate_grad(np.outer(g, x.data).astype(weights.data.dtype))
        if bias is not None:
            bias.accumulate_grad(g.astype(bias.data.dtype))

    parents = (x, weights) if bias is None else (x, weights, bias)
    return _result(data, parents, backward, "dense")


def softmax(x: Tensor) -> Tensor:
    """Probability vector over a 1-d input, max-subtracted for stability."""
    if x.data.ndim != 1:
        raise DimensionError("softmax expects a 1-d input")
    z = x.data - x.data.max()
    e = np.exp(z)
    s = e / e.sum()

    def backward(g):
        x.accumulate_grad((s * (g - np.dot(g, s))).astype(x.data.dtype))

    return _result(s, (x,), backward, "softmax")


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Stack C_i x H x W maps along the channel axis, in argument order."""
    if not inputs:
        raise DimensionError("concat_channels needs at least one input")
    hw = inputs[0].shape[1:]
    for t in inputs:
        if t.data.ndim != 3:
            raise DimensionError("concat_channels expects rank-3 tensors")
        if t.shape[1:] != hw:
            raise DimensionError(f"concat_channels: spatial mismatch {t.shape[1:]} vs {hw}")
    data = np.concatenate([t.data for t in inputs], axis=0)
    splits = np.cumsum([t.shape[0] for t in inputs])[:-1]

    def backward(g):
        for t, piece in zip(inputs, np.split(g, splits, axis=0)):
            t.accumulate_grad(piece.astype(t.data.dtype))

    return _result(data, tuple(inputs), backward, "concat_channels")


def _im2col(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    # (C, k, k, Ho, Wo) strided view of the padded input, then a flat copy.
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (c, k, k, out_h, out_w), (s0, s1, s2, s1 * stride, s2 * stride)
    )
    return view.reshape(c * k * k, out_h * out_w)


def _pad2d(x: np.ndarray, padding: int) -> np.ndarray:
    c, h, w = x.shape
    out = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, padding : padding + h, padding : padding + w] = x
    return out


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of a C_in x H x W map with C_out x C_in x k x k kernels."""
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise DimensionError("conv2d expects rank-3 input and rank-4 kernel")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernel.shape
    if kh != kw:
        raise DimensionError("conv2d supports square kernels only")
    if kc != c_in:
        raise DimensionError(f"conv2d: kernel expects {kc} input channels, input has {c_in}")
    k = kh
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel {k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1

    xp = _pad2d(x.data, padding) if padding else x.data
    cols = _im2col(xp, k, stride, out_h, out_w)
    data = (kernel.data.reshape(c_out, -1) @ cols).reshape(c_out, out_h, out_w)

    def backward(g):
        gm = g.reshape(c_out, -1)
        kernel.accumulate_grad((gm @ cols.T).reshape(kernel.shape).astype(kernel.data.dtype, copy=False))
        dcols = (kernel.data.reshape(c_out, -1).T @ gm).reshape(c_in, k, k, out_h, out_w)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += dcols[:, i, j]
        if padding:
            dxp = dxp[:, padding : padding + h, padding : padding + w]
        x.accumulate_grad(dxp.astype(x.data.dtype, copy=False))

    return _result(data, (x, kernel), backward, "conv2d")


_UPSAMPLE_MATRICES: dict[tuple[int, int, str], np.ndarray] = {}


def _upsample_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    """(n_in * factor) x n_in interpolation weights: align-corners-false
    source coordinates with edge clamping."""
    key = (n_in, factor, np.dtype(dtype).str)
    cached = _UPSAMPLE_MATRICES.get(key)
    if cached is not None:
        return cached
    src = (np.arange(n_in * factor) + 0.5) / factor - 0.5
    lo = np.floor(src)
    frac = src - lo
    i0 = np.clip(lo, 0, n_in - 1).astype(np.intp)
    i1 = np.clip(lo + 1, 0, n_in - 1).astype(np.intp)
    mat = np.zeros((n_in * factor, n_in), dtype=dtype)
    rows = np.arange(n_in * factor)
    np.add.at(mat, (rows, i0), (1.0 - frac).astype(dtype))
    np.add.at(mat, (rows, i1), frac.astype(dtype))
    _UPSAMPLE_MATRICES[key] = mat
    return mat


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upsample C x H x W by a power-of-two factor with bilinear weights."""
    if factor not in (2, 4, 8):
        raise ConfigError(f"bilinear_upsample: factor must be 2, 4 or 8, got {factor}")
    if x.data.ndim != 3:
        raise DimensionError("bilinear_upsample expects a rank-3 tensor")
    c, h, w = x.shape
    wy = _upsample_matrix(h, factor, x.data.dtype)  # (h*f, h)
    wx = _upsample_matrix(w, factor, x.data.dtype)  # (w*f, w)
    data = np.matmul(wy, x.data) @ wx.T

    def backward(g):
        x.accumulate_grad((np.matmul(wy.T, g) @ wx).astype(x.data.dtype, copy=False))

    return _result(data, (x,), backward, "bilinear_upsample")


def pool_spatial(
    x: Tensor,
    mode: str = "avg",
    global_pool: bool = False,
    window: int | None = None,
    stride: int | None = None,
) -> Tensor:
    """Spatial max/avg pooling; global mode reduces to C x 1 x 1.

    Max gradients route to the first argmax in row-major order.
    """
    if mode not in ("max", "avg"):
        raise ConfigError(f"pool_spatial: unknown mode {mode!r}")
    if x.data.ndim != 3:
        raise DimensionError("pool_spatial expects a rank-3 tensor")
    c, h, w = x.shape

    if global_pool:
        if mode == "avg":
            data = x.data.mean(axis=(1, 2), keepdims=True)

            def backward(g):
                x.accumulate_grad(np.broadcast_to(g / (h * w), x.shape).astype(x.data.dtype).copy())

        else:
            flat = x.data.reshape(c, -1)
            idx = flat.argmax(axis=1)
            data = flat[np.arange(c), idx].reshape(c, 1, 1)

            def backward(g):
                dx = np.zeros((c, h * w), dtype=x.data.dtype)
                dx[np.arange(c), idx] = g.reshape(c)
                x.accumulate_grad(dx.reshape(x.shape))

        return _result(data.astype(x.data.dtype), (x,), backward, f"global_{mode}_pool")

    if window is None or stride is None:
        raise ConfigError("pool_spatial: window and stride required when not global")
    if window > h or window > w:
        raise DimensionError(f"pool_spatial: window {window} exceeds spatial extent {h}x{w}")
    out_h = (h - window) // stride + 1
    out_w = (w - window) // stride + 1
    s0, s1, s2 = x.data.strides
    view = np.lib.stride_tricks.as_strided(
        x.data, (c, out_h, out_w, window, window), (s0, s1 * stride, s2 * stride, s1, s2)
    )
    patches = view.reshape(c, out_h, out_w, window * window)

    if mode == "avg":
        data = patches.mean(axis=3)

        def backward(g):
            dx = np.zeros_like(x.data)
            gs = g / (window * window)
            for i in range(window):
                for j in range(window):
                    dx[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += gs
            x.accumulate_grad(dx)

    else:
        idx = patches.argmax(axis=3)
        data = np.take_along_axis(patches, idx[..., None], axis=3)[..., 0]

        def backward(g):
            dx = np.zeros_like(x.data)
            ii = idx // window
            jj = idx % window
            oy, ox = np.meshgrid(np.arange(out_h), np.arange(out_w), indexing="ij")
            rows = (oy * stride)[None] + ii
            cols_ = (ox * stride)[None] + jj
            ch = np.arange(c)[:, None, None]
            np.add.at(dx, (ch, rows, cols_), g)
            x.accumulate_grad(dx)

    return _result(data.astype(x.data.dtype), (x,), backward, f"{mode}_pool")


def pool_channelwise(x: Tensor, mode: str = "avg") -> Tensor:
    """Reduce the channel axis of C x H x W to 1 x H x W by max or mean."""
    if mode not in ("max", "avg"):
        raise ConfigError(f"pool_channelwise: unknown mode {mode!r}")
    if x.data.ndim != 3:
        raise DimensionError("pool_channelwise expects a rank-3 tensor")
    c, h, w = x.shape
    if mode == "avg":
        data = x.data.mean(axis=0, keepdims=True)

        def backward(g):
            x.accumulate_grad(np.broadcast_to(g / c, x.shape).astype(x.data.dtype).copy())

    else:
        idx = x.data.argmax(axis=0)
        data = np.take_along_axis(x.data, idx[None], axis=0)

        def backward(g):
            dx = np.zeros_like(x.data)
            np.put_along_axis(dx, idx[None], g, axis=0)
            x.accumulate_grad(dx)

    return _result(data.astype(x.data.dtype), (x,), backward, f"channel_{mode}_pool")


class BatchNormState:
    """Per-channel affine parameters plus running statistics.

    Graphs here carry one sample, so training mode normalizes by the
    running statistics as they stood before the sample and then folds the
    sample's own spatial statistics into the running buffers with momentum
    0.1. The normalizer therefore never depends on the current input:
    gradients are exact, per-sample evidence stays local (a bright region
    stays bright relative to the data distribution), and eval mode is the
    same transform with the buffers frozen.
    """

    def __init__(self, channels: int, dtype=np.float32, eps: float = 1e-5, momentum: float = 0.1):
        self.scale = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))
        self.eps = eps
        self.momentum = momentum

    @property
    def channels(self) -> int:
        return self.scale.shape[0]


def batchnorm2d(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Channel-wise normalization of a C x H x W map with learnable affine.

    Both modes normalize by the running buffers; training mode additionally
    folds the current map's spatial statistics into them (after the values
    used for normalization are taken, so the normalizer is a constant with
    respect to the input and the backward pass is exact).
    """
    if x.data.ndim != 3:
        raise DimensionError("batchnorm2d expects a rank-3 tensor")
    c, h, w = x.shape
    if state.channels != c:
        raise DimensionError(f"batchnorm2d: state has {state.channels} channels, input {c}")
    scale, shift = state.scale, state.shift
    eps = x.data.dtype.type(state.eps)

    mean = state.running_mean.data.copy()
    inv_std = 1.0 / np.sqrt(state.running_var.data + eps)
    if training:
        sample_mean = x.data.mean(axis=(1, 2))
        centered = x.data - sample_mean[:, None, None]
        sample_var = np.square(centered).mean(axis=(1, 2))
        m = state.momentum
        state.running_mean.data = ((1 - m) * state.running_mean.data + m * sample_mean).astype(
            state.running_mean.data.dtype
        )
        state.running_var.data = ((1 - m) * state.running_var.data + m * sample_var).astype(
            state.running_var.data.dtype
        )

    xhat = (x.data - mean[:, None, None]) * inv_std[:, None, None]
    data = scale.data[:, None, None] * xhat + shift.data[:, None, None]

    def backward(g):
        x.accumulate_grad((g * (scale.data * inv_std)[:, None, None]).astype(x.data.dtype, copy=False))
        scale.accumulate_grad((g * xhat).sum(axis=(1, 2)).astype(scale.data.dtype, copy=False))
        shift.accumulate_grad(g.sum(axis=(1, 2)).astype(shift.data.dtype, copy=False))

    return _result(data.astype(x.data.dtype, copy=False), (x, scale, shift), backward, "batchnorm2d")


def constant(data, dtype=None) -> Tensor:
    """A non-trainable tensor, e.g. penalty-matrix columns or one-hot masks."""
    return Tensor(data, requires_grad=False, dtype=dtype)
