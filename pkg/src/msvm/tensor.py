"""Dense tensor substrate with a small reverse-mode tape.

Feature maps are channels-last (``[..., H, W, D]``) and sequences are
``[..., L, D]``; any leading axes are treated as batch axes.  Every primitive
here returns a :class:`Tensor` whose backward closure computes the
vector-Jacobian product with respect to its tensor inputs.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyOutputError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, like=self)))

    def __neg__(self):
        return neg(self)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a cotangent needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    return _result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    return _result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so neither branch overflows or cancels
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)
    return _result(y, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return _result(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),), "silu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation (forward and vjp use the same formula)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(y, (a,), back, "gelu")


# ---------------------------------------------------------------- reductions / shape

def sum_all(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Gather along one axis; repeated indices accumulate in the vjp."""
    index = np.asarray(index, dtype=np.intp)
    axis = axis % a.ndim
    y = np.take(a.data, index, axis=axis)

    def back(g):
        gx = np.zeros(np.moveaxis(a.data, axis, 0).shape, dtype=g.dtype)
        np.add.at(gx, index, np.moveaxis(g, axis, 0))
        return (np.moveaxis(gx, 0, axis),)

    return _result(y, (a,), back, "take")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes of ``[..., H, W, D]``."""
    h, w = x.shape[-3], x.shape[-2]

    def back(g):
        return (np.broadcast_to(g[..., None, None, :] / (h * w), x.shape).copy(),)

    return _result(x.data.mean(axis=(-3, -2)), (x,), back, "global_avg_pool")


# ---------------------------------------------------------------- dense / norm

def dense_affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``out[..., j] = sum_i w[j, i] * x[..., i] + b[j]``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense_affine: input shape {x.shape} incompatible with weight shape {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"dense_affine: bias shape {b.shape} does not match weight shape {w.shape}")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = g @ w.data
        gw = g2.T @ x2
        return (gx, gw) if b is None else (gx, gw, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _result(y, parents, back, "dense_affine")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(y, (x, gamma, beta), back, "layer_norm")


# ---------------------------------------------------------------- spatial

def _conv_out(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def dwconv2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """Depthwise 2D cross-correlation over ``[..., H, W, D]`` with kernel ``[Kh, Kw, D]``."""
    kh, kw, d = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"dwconv2d: kernel extents must be odd, got {k.shape}")
    if x.shape[-1] != d:
        raise ShapeError(f"dwconv2d: input shape {x.shape} incompatible with kernel shape {k.shape}")
    H, W = x.shape[-3], x.shape[-2]
    ho, wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise EmptyOutputError(f"dwconv2d: input {H}x{W} with kernel {kh}x{kw}, stride {stride}, "
                               f"padding {padding} gives empty output {ho}x{wo}")
    pad = [(0, 0)] * (x.ndim - 3) + [(padding, padding), (padding, padding), (0, 0)]
    xp = np.pad(x.data, pad)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    y = np.zeros(x.shape[:-3] + (ho, wo, d), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            y += xp[..., i:i + hs:stride, j:j + ws:stride, :] * k.data[i, j]
    if bias is not None:
        y += bias.data

    def back(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(k.data)
        lead = tuple(range(g.ndim - 1))
        for i in range(kh):
            for j in range(kw):
                gxp[..., i:i + hs:stride, j:j + ws:stride, :] += g * k.data[i, j]
                gk[i, j] = (g * xp[..., i:i + hs:stride, j:j + ws:stride, :]).sum(axis=lead)
        gx = gxp[..., padding:padding + H, padding:padding + W, :]
        grads = (gx, gk)
        return grads if bias is None else grads + (g.sum(axis=lead),)

    parents = (x, k) if bias is None else (x, k, bias)
    return _result(y, parents, back, "dwconv2d")


def nearest_index(n_out: int, n_in: int) -> np.ndarray:
    return (np.arange(n_out) * n_in) // n_out


def interpolate_nearest(x: Tensor, H: int, W: int) -> Tensor:
    """Nearest-neighbour upsampling of ``[..., h, w, D]`` to ``[..., H, W, D]``."""
    h, w = x.shape[-3], x.shape[-2]
    if min(h, w, H, W) <= 0:
        raise ShapeError(f"interpolate_nearest: zero extent (input {h}x{w}, target {H}x{W})")
    if H < h or W < w:
        raise ShapeError(f"interpolate_nearest: only upsampling is supported ({h}x{w} -> {H}x{W})")
    if (H, W) == (h, w):
        return x
    return take(take(x, nearest_index(H, h), -3), nearest_index(W, w), -2)


def patchify(x: Tensor, p: int) -> Tensor:
    """Rearrange ``[..., H, W, D]`` into non-overlapping ``p x p`` patches ``[..., H/p, W/p, p*p*D]``.

    Extents that are not multiples of ``p`` are zero-padded at the bottom/right,
    so a ``p x p`` stride-``p`` convolution is ``dense_affine(patchify(x, p), ...)``.
    """
    *lead, H, W, D = x.shape
    ho, wo = -(-H // p), -(-W // p)
    pad = [(0, 0)] * len(lead) + [(0, ho * p - H), (0, wo * p - W), (0, 0)]
    xp = np.pad(x.data, pad)
    n = len(lead)
    perm = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    y = xp.reshape(*lead, ho, p, wo, p, D).transpose(perm).reshape(*lead, ho, wo, p * p * D)

    def back(g):
        gp = g.reshape(*lead, ho, wo, p, p, D).transpose(perm).reshape(xp.shape)
        return (gp[..., :H, :W, :],)

    return _result(y, (x,), back, "patchify")


# ---------------------------------------------------------------- losses

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``[B, K]`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), back, "cross_entropy")
