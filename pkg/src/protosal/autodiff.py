"""Small reverse-mode autodiff engine over numpy arrays.

Images use NHWC layout throughout. Every op records a ``Function`` node on
the output tensor; :func:`backward` walks the tape in reverse topological
order. The ReLU backward rule is selectable per backward pass through
:class:`GradMode`, which is how deconvolution and guided backpropagation are
obtained without touching the forward pass.
"""
from __future__ import annotations

import contextlib
import contextvars
import enum
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class GradMode(str, enum.Enum):
    STANDARD = "standard"
    DECONV = "deconv"
    GUIDED = "guided"


class StaleGraphError(RuntimeError):
    """Raised when backward is requested without a live forward tape."""


_grad_mode: contextvars.ContextVar[GradMode] = contextvars.ContextVar(
    "grad_mode", default=GradMode.STANDARD)
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "grad_enabled", default=True)

# Instrumentation: number of backward passes run in this process.
backward_calls = 0


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    """An n-d array with an optional gradient and a link to its producer."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._fn: Function | None = None
        self._released = False

    # -- array-like surface -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return Add.apply(self, Neg.apply(other))

    def __rsub__(self, other):
        return Add.apply(other, Neg.apply(self))

    def __mul__(self, other):
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return Mul.apply(self, Pow.apply(other, p=-1.0))
        return DivConst.apply(self, c=float(other))

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, p: float):
        return Pow.apply(self, p=float(p))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return DivConst.apply(Sum.apply(self, axis=axis, keepdims=keepdims), c=float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def max(self, axis: int, keepdims: bool = False):
        return ArgReduce.apply(self, axis=axis, keepdims=keepdims, largest=True)

    def min(self, axis: int, keepdims: bool = False):
        return ArgReduce.apply(self, axis=axis, keepdims=keepdims, largest=False)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def relu(self):
        return ReLU.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def backward(self, grad=None, mode: GradMode = GradMode.STANDARD, retain_graph: bool = False):
        backward(self, grad, mode=mode, retain_graph=retain_graph)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Function:
    """A recorded op. ``forward`` sees raw arrays; ``backward`` returns one
    gradient (or None) per parent."""

    parents: tuple[Tensor | None, ...] = ()
    needs_grad: tuple[bool, ...] = ()

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        # Python scalars stay raw so they do not promote float32 arrays.
        fn = cls()
        raw = [t.data if isinstance(t, Tensor) else t for t in inputs]
        out = Tensor(fn.forward(*raw, **kwargs))
        if _grad_enabled.get() and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
            fn.parents = tuple(t if isinstance(t, Tensor) else None for t in inputs)
            fn.needs_grad = tuple(isinstance(t, Tensor) and t.requires_grad for t in inputs)
            out._fn = fn
            out.requires_grad = True
        return out

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._fn is not None:
            for p in node._fn.parents:
                if p is not None and p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(root: Tensor, grad=None, mode: GradMode = GradMode.STANDARD,
             retain_graph: bool = False) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that
    requires a gradient."""
    global backward_calls
    if not root.requires_grad or root._released:
        raise StaleGraphError("tensor is not attached to a live recorded graph")
    if grad is None:
        if root.size != 1:
            raise ValueError("grad must be given for non-scalar outputs")
        grad = np.ones_like(root.data)
    grad = np.asarray(grad, dtype=root.dtype)
    if grad.shape != root.shape:
        raise ValueError(f"output grad shape {grad.shape} != output shape {root.shape}")
    backward_calls += 1
    token = _grad_mode.set(GradMode(mode))
    try:
        grads = {id(root): grad}
        for node in reversed(_topological(root)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            fn = node._fn
            if fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(fn.parents, fn.backward(g)):
                if pg is None or parent is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            if not retain_graph:
                node._fn = None
                node._released = True
    finally:
        _grad_mode.reset(token)


# ---------------------------------------------------------------------------
# elementwise and shape ops


class Add(Function):
    def forward(self, a, b):
        self.shapes = np.shape(a), np.shape(b)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return (_unbroadcast(g * self.b, np.shape(self.a)),
                _unbroadcast(g * self.a, np.shape(self.b)))


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class DivConst(Function):
    # true division, so x / n rounds once (x * (1/n) can be an ulp off)
    def forward(self, a, c):
        self.c = c
        return a / c

    def backward(self, g):
        return (g / self.c,)


class Pow(Function):
    def forward(self, a, p):
        self.a, self.p = a, p
        return a ** p

    def backward(self, g):
        return (g * self.p * self.a ** (self.p - 1.0),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class Sigmoid(Function):
    def forward(self, a):
        self.out = 1.0 / (1.0 + np.exp(-a))
        return self.out

    def backward(self, g):
        return (g * self.out * (1.0 - self.out),)


class ReLU(Function):
    """ReLU whose backward rule follows the active :class:`GradMode`."""

    def forward(self, a):
        self.positive = a > 0
        return a * self.positive

    def backward(self, g):
        mode = _grad_mode.get()
        if mode is GradMode.DECONV:
            return (np.maximum(g, 0),)
        if mode is GradMode.GUIDED:
            return (g * (self.positive & (g > 0)),)
        return (g * self.positive,)


class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        a, b = self.a, self.b
        da = g @ b.T
        db = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return da, db


class Sum(Function):
    def forward(self, a, axis, keepdims):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = axes if axes is not None else tuple(reversed(range(a.ndim)))
        return a.transpose(self.axes)

    def backward(self, g):
        return (g.transpose(np.argsort(self.axes)),)


class ArgReduce(Function):
    """max/min along one axis; the gradient goes to the first extremal entry."""

    def forward(self, a, axis, keepdims, largest):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        self.idx = np.expand_dims((np.argmax if largest else np.argmin)(a, axis=axis), axis)
        out = np.take_along_axis(a, self.idx, axis=axis)
        return out if keepdims else np.squeeze(out, axis=axis)

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.axis)
        out = np.zeros(self.shape, dtype=g.dtype)
        np.put_along_axis(out, self.idx, g, axis=self.axis)
        return (out,)


# ---------------------------------------------------------------------------
# network layers


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N,H,W,C) -> contiguous (N,Ho,Wo,kh,kw,C) patch array."""
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    v = v[:, :stride * (ho - 1) + 1:stride, :stride * (wo - 1) + 1:stride]
    return np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 3))


def _col2im(dcols: np.ndarray, padded_shape, stride: int) -> np.ndarray:
    n, ho, wo, kh, kw, c = dcols.shape
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    return dxp


class Conv2d(Function):
    """x: (N,H,W,Cin); w: (kh,kw,Cin,Cout); b: (Cout,)."""

    def forward(self, x, w, b, stride=1, padding=0):
        kh, kw, cin, cout = w.shape
        if x.ndim != 4 or x.shape[-1] != cin:
            raise ValueError(f"conv2d expects (N,H,W,{cin}) input, got {x.shape}")
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
        ho = (xp.shape[1] - kh) // stride + 1
        wo = (xp.shape[2] - kw) // stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {xp.shape[1:3]}")
        self.cols = _im2col(xp, kh, kw, stride, ho, wo)
        self.w, self.stride, self.padding = w, stride, padding
        self.padded_shape = xp.shape
        out = self.cols.reshape(-1, kh * kw * cin) @ w.reshape(-1, cout) + b
        return out.reshape(x.shape[0], ho, wo, cout)

    def backward(self, g):
        w = self.w
        g2 = g.reshape(-1, w.shape[-1])
        cols2 = self.cols.reshape(g2.shape[0], -1)
        dw = (cols2.T @ g2).reshape(w.shape)
        db = g2.sum(axis=0)
        if not self.needs_grad[0]:
            return None, dw, db
        dcols = (g2 @ w.reshape(-1, w.shape[-1]).T).reshape(self.cols.shape)
        dxp = _col2im(dcols, self.padded_shape, self.stride)
        p = self.padding
        dx = dxp[:, p:dxp.shape[1] - p, p:dxp.shape[2] - p, :] if p else dxp
        return dx, dw, db


def _running_max(blocks):
    """Elementwise max over a list of equal-shaped arrays plus the index of
    the first block attaining it."""
    out = blocks[0].copy()
    idx = np.zeros(out.shape, dtype=np.uint8)
    for t in range(1, len(blocks)):
        better = blocks[t] > out
        np.maximum(out, blocks[t], out=out)
        idx[better] = t
    return out, idx


class MaxPool2d(Function):
    """Non-overlapping k x k max pool. The backward pass routes gradient to the
    recorded argmax ("switch") in every mode; ties resolve to the first row,
    then the first column of the window."""

    def forward(self, x, k):
        n, h, w, c = x.shape
        if h % k or w % k:
            raise ValueError(f"max-pool {k} does not tile input {h}x{w}")
        self.k, self.shape = k, x.shape
        r = x.reshape(n, h // k, k, w // k, k, c)
        rows, self.row_idx = _running_max([r[:, :, t] for t in range(k)])
        out, self.col_idx = _running_max([rows[:, :, :, t] for t in range(k)])
        return out

    def backward(self, g):
        k = self.k
        n, h, w, c = self.shape
        grows = np.empty((n, h // k, w // k, k, c), dtype=g.dtype)
        for t in range(k):
            np.multiply(g, self.col_idx == t, out=grows[:, :, :, t])
        dr = np.empty((n, h // k, k, w // k, k, c), dtype=g.dtype)
        for t in range(k):
            np.multiply(grows, self.row_idx == t, out=dr[:, :, t])
        return (dr.reshape(self.shape),)


class AvgPool2d(Function):
    def forward(self, x, k):
        n, h, w, c = x.shape
        if h % k or w % k:
            raise ValueError(f"avg-pool {k} does not tile input {h}x{w}")
        self.k, self.shape = k, x.shape
        return x.reshape(n, h // k, k, w // k, k, c).mean(axis=(2, 4))

    def backward(self, g):
        k = self.k
        dx = np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)
        return (dx.astype(g.dtype, copy=False),)


class GlobalAvgPool(Function):
    def forward(self, x):
        self.shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, g):
        n, h, w, c = self.shape
        return (np.broadcast_to(g[:, None, None, :] / (h * w), self.shape).copy(),)


def _colsum(x2d: np.ndarray) -> np.ndarray:
    return np.ones(x2d.shape[0], dtype=x2d.dtype) @ x2d


class BatchNorm(Function):
    """Per-channel normalisation over every axis but the last.

    In training mode batch statistics are used (and the running buffers are
    updated in place); otherwise the running statistics are used.
    """

    def forward(self, x, gamma, beta, running_mean, running_var, training=False,
                momentum=0.1, eps=1e-5):
        self.shape = x.shape
        x2 = x.reshape(-1, x.shape[-1])
        m = x2.shape[0]
        self.training = training
        if training:
            mean = _colsum(x2) / m
            centred = x2 - mean
            var = _colsum(centred * centred) / m
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * var * (m / max(m - 1, 1))
        else:
            mean, var = running_mean, running_var
            centred = x2 - mean
        self.inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        self.xhat = centred * self.inv_std
        self.gamma = gamma
        return (self.xhat * gamma + beta).reshape(x.shape)

    def backward(self, g):
        g2 = g.reshape(self.xhat.shape)
        dgamma = _colsum(g2 * self.xhat)
        dbeta = _colsum(g2)
        scale = self.gamma * self.inv_std
        if self.training:
            m = g2.shape[0]
            dx = scale * (g2 - (dbeta / m) - self.xhat * (dgamma / m))
        else:
            dx = g2 * scale
        return dx.reshape(self.shape), dgamma, dbeta, None, None


class Softmax(Function):
    def forward(self, x):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, g):
        s = self.out
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


class SoftmaxCrossEntropy(Function):
    """Mean cross-entropy of integer labels under softmax(logits)."""

    def forward(self, logits, labels):
        labels = labels.astype(np.int64)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        logp = shifted - logz
        self.p = np.exp(logp)
        self.labels = labels
        n = logits.shape[0]
        return np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.dtype)

    def backward(self, g):
        n = self.p.shape[0]
        d = self.p.copy()
        d[np.arange(n), self.labels] -= 1
        return d * (g / n), None


class TopKMean(Function):
    """Mean of the k largest entries along ``axis``."""

    def forward(self, x, k, axis=1):
        self.axis, self.k, self.shape = axis, k, x.shape
        self.idx = np.argsort(-x, axis=axis, kind="stable").take(np.arange(k), axis=axis)
        return np.take_along_axis(x, self.idx, axis=axis).mean(axis=axis)

    def backward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        gk = np.broadcast_to(np.expand_dims(g / self.k, self.axis), self.idx.shape)
        np.put_along_axis(out, self.idx, gk, axis=self.axis)
        return (out,)


class SquaredL2Map(Function):
    """Squared L2 distance between every (hp, wp) latent window and every
    prototype. z: (N,H,W,D); protos: (m,hp,wp,D) -> (N,H-hp+1,W-wp+1,m)."""

    def forward(self, z, protos):
        m, hp, wp, d = protos.shape
        if z.ndim != 4 or z.shape[-1] != d:
            raise ValueError(f"latent channels {z.shape[-1:]} do not match prototype depth {d}")
        if z.shape[1] < hp or z.shape[2] < wp:
            raise ValueError(f"latent grid {z.shape[1:3]} smaller than prototype {hp}x{wp}")
        ho, wo = z.shape[1] - hp + 1, z.shape[2] - wp + 1
        self.cols = _im2col(z, hp, wp, 1, ho, wo)
        self.zshape, self.pshape = z.shape, protos.shape
        self.diff = self.cols.reshape(z.shape[0], ho, wo, 1, -1) - protos.reshape(m, -1)
        return np.einsum("nhwmk,nhwmk->nhwm", self.diff, self.diff)

    def backward(self, g):
        gd = 2.0 * g[..., None] * self.diff
        dcols = gd.sum(axis=3).reshape(self.cols.shape)
        dz = _col2im(dcols, self.zshape, 1)
        dp = -gd.sum(axis=(0, 1, 2)).reshape(self.pshape)
        return dz, dp


class LogSimilarity(Function):
    """log((d + 1) / (d + eps)), decreasing in the distance d >= 0."""

    def forward(self, d, eps):
        self.d, self.eps = d, eps
        return np.log((d + 1.0) / (d + eps))

    def backward(self, g):
        return (g * (1.0 / (self.d + 1.0) - 1.0 / (self.d + self.eps)),)


class ChannelPad(Function):
    """Zero-pad the channel axis up to ``channels`` (identity shortcut)."""

    def forward(self, x, channels):
        self.c = x.shape[-1]
        pad = [(0, 0)] * (x.ndim - 1) + [(0, channels - self.c)]
        return np.pad(x, pad)

    def backward(self, g):
        return (g[..., :self.c],)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row i holds the half-pixel bilinear weights of output i on the input."""
    a = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    a[np.arange(n_out), lo] += 1 - frac
    a[np.arange(n_out), hi] += frac
    return a


class BilinearUpsample(Function):
    def forward(self, x, size):
        h, w = size
        self.ah = interp_matrix(x.shape[1], h, x.dtype)
        self.aw = interp_matrix(x.shape[2], w, x.dtype)
        return np.einsum("Hh,nhwc,Ww->nHWc", self.ah, x, self.aw, optimize=True)

    def backward(self, g):
        return (np.einsum("Hh,nHWc,Ww->nhwc", self.ah, g, self.aw, optimize=True),)


# ---------------------------------------------------------------------------
# functional front end

def relu(x):
    return ReLU.apply(x)


def conv2d(x, w, b, stride: int = 1, padding: int = 0):
    return Conv2d.apply(x, w, b, stride=stride, padding=padding)


def max_pool2d(x, k: int = 2):
    return MaxPool2d.apply(x, k=k)


def avg_pool2d(x, k: int = 2):
    return AvgPool2d.apply(x, k=k)


def global_avg_pool(x):
    return GlobalAvgPool.apply(x)


def batch_norm(x, gamma, beta, running_mean, running_var, training=False, momentum=0.1, eps=1e-5):
    return BatchNorm.apply(x, gamma, beta, Tensor(running_mean), Tensor(running_var),
                           training=training, momentum=momentum, eps=eps)


def softmax(x):
    return Softmax.apply(x)


def cross_entropy(logits, labels):
    return SoftmaxCrossEntropy.apply(logits, Tensor(np.asarray(labels), dtype=np.int64))


def topk_mean(x, k: int, axis: int = 1):
    return TopKMean.apply(x, k=k, axis=axis)


def squared_l2_map(z, protos):
    return SquaredL2Map.apply(z, protos)


def log_similarity(d, eps: float = 1e-4):
    if eps <= 0:
        raise ValueError("similarity epsilon must be > 0")
    return LogSimilarity.apply(d, eps=eps)


def channel_pad(x, channels: int):
    return ChannelPad.apply(x, channels=channels)


def bilinear_upsample(x, size: tuple[int, int]):
    return BilinearUpsample.apply(x, size=tuple(size))


# ---------------------------------------------------------------------------
# gradient verification

def gradcheck(func: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5,
              floor: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients
    of the scalar ``func()`` with respect to every entry of ``tensors``.

    ``floor`` bounds the denominator so entries whose true gradient is zero
    are compared in absolute terms.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    out = func()
    if out.size != 1:
        raise ValueError(f"gradcheck needs a scalar output, got shape {out.shape}")
    backward(out)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                up = float(func().data)
            flat[i] = orig - eps
            with no_grad():
                down = float(func().data)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
