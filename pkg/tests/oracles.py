"""Slow, loop-based reference implementations used only by the tests.

Nothing here calls into ``msvm`` numerics; parameters are read as plain arrays.
"""
from __future__ import annotations

import math

import numpy as np


def softplus(x: float) -> float:
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


def project(u: np.ndarray, a_log, w_b, w_c, w_dt_down, w_dt_up, dt_bias):
    """Per-token ``delta [L, D]``, ``B [L, N]``, ``C [L, N]`` with explicit sums."""
    L, D = u.shape
    N, R = w_b.shape[0], w_dt_down.shape[0]
    delta = np.zeros((L, D))
    B = np.zeros((L, N))
    C = np.zeros((L, N))
    for t in range(L):
        low = [sum(w_dt_down[r, j] * u[t, j] for j in range(D)) for r in range(R)]
        for d in range(D):
            delta[t, d] = softplus(sum(w_dt_up[d, r] * low[r] for r in range(R)) + dt_bias[d])
        for k in range(N):
            B[t, k] = sum(w_b[k, j] * u[t, j] for j in range(D))
            C[t, k] = sum(w_c[k, j] * u[t, j] for j in range(D))
    return delta, B, C


def arrays(params) -> tuple[np.ndarray, ...]:
    return tuple(np.asarray(params.tensors()[k].data, dtype=np.float64)
                 for k in ("a_log", "w_b", "w_c", "w_dt_down", "w_dt_up", "dt_bias"))


def scan(u: np.ndarray, params) -> np.ndarray:
    """Scalar recurrence, one channel/state at a time."""
    a_log = arrays(params)[0]
    delta, B, C = project(u, *arrays(params))
    L, D = u.shape
    N = a_log.shape[1]
    y = np.zeros((L, D))
    for d in range(D):
        for k in range(N):
            A = -math.exp(a_log[d, k])
            h = 0.0
            for t in range(L):
                h = math.exp(delta[t, d] * A) * h + delta[t, d] * B[t, k] * u[t, d]
                y[t, d] += C[t, k] * h
    return y


def kernel_entry(u: np.ndarray, params, d: int, n: int, m: int) -> float:
    """``C_n . prod_{i=m+1}^{n} Abar_i . Bbar_m`` for one channel."""
    a_log = arrays(params)[0]
    delta, B, C = project(u, *arrays(params))
    total = 0.0
    for k in range(a_log.shape[1]):
        A = -math.exp(a_log[d, k])
        prod = 1.0
        for i in range(m + 1, n + 1):
            prod *= math.exp(delta[i, d] * A)
        total += C[n, k] * prod * delta[m, d] * B[m, k]
    return total


def mean_decay(u: np.ndarray, params, m: int, n: int) -> float:
    """Mean over channels and states of ``prod_{i=m+1}^{n} exp(delta_i A)``."""
    a_log = arrays(params)[0]
    delta, _, _ = project(u, *arrays(params))
    D, N = a_log.shape
    acc = 0.0
    for d in range(D):
        for k in range(N):
            acc += math.exp(sum(delta[i, d] for i in range(m + 1, n + 1)) * -math.exp(a_log[d, k]))
    return acc / (D * N)


def route_sequence(name: str, H: int, W: int) -> list[tuple[int, int]]:
    """Visiting order of a route, written out cell by cell."""
    if name.startswith("row"):
        seq = [(p, q) for p in range(H) for q in range(W)]
    else:
        seq = [(p, q) for q in range(W) for p in range(H)]
    return seq[::-1] if name.endswith("rev") else seq


def dwconv(x: np.ndarray, k: np.ndarray, stride: int, pad: int, bias=None) -> np.ndarray:
    H, W, D = x.shape
    kh, kw, _ = k.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((Ho, Wo, D))
    for i in range(Ho):
        for j in range(Wo):
            for d in range(D):
                s = 0.0 if bias is None else bias[d]
                for a in range(kh):
                    for b in range(kw):
                        p, q = i * stride + a - pad, j * stride + b - pad
                        if 0 <= p < H and 0 <= q < W:
                            s += x[p, q, d] * k[a, b, d]
                out[i, j, d] = s
    return out


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    for idx in np.ndindex(*x.shape[:-1]):
        row = [float(v) for v in x[idx]]
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        out[idx] = [(v - mu) / math.sqrt(var + eps) * g[i] + b[i] for i, v in enumerate(row)]
    return out


def gelu_tanh(x: float) -> float:
    return 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)
