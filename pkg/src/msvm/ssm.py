"""S6 selective scan: ZOH discretisation, recurrence, explicit kernel, decay terms."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import DomainError, OrderingError, ShapeError, StateError
from .tensor import Tensor


@dataclass
class SsmParams:
    """One S6 parameter group over ``D`` channels with state size ``N``.

    ``A = -exp(a_log)`` is diagonal per channel.  ``B`` and ``C`` (``[L, N]``)
    are shared across channels and projected from the input; ``delta``
    (``[L, D]``) comes from a low-rank projection followed by softplus.
    """

    a_log: Tensor      # [D, N]
    w_b: Tensor        # [N, D]
    w_c: Tensor        # [N, D]
    w_dt_down: Tensor  # [R, D]
    w_dt_up: Tensor    # [D, R]
    dt_bias: Tensor    # [D]
    skip: Tensor | None = None  # [D], additive passthrough; off by default

    @property
    def D(self) -> int:
        return self.a_log.shape[0]

    @property
    def N(self) -> int:
        return self.a_log.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    def A(self) -> Tensor:
        return T.neg(T.exp(self.a_log))

    def project(self, u: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Input-dependent ``(delta, B, C)`` for a sequence ``u`` of shape ``[..., L, D]``."""
        if u.shape[-1] != self.D:
            raise ShapeError(f"sequence shape {u.shape} does not match parameter width D={self.D}")
        dt = T.dense_affine(T.dense_affine(u, self.w_dt_down), self.w_dt_up, self.dt_bias)
        return T.softplus(dt), T.dense_affine(u, self.w_b), T.dense_affine(u, self.w_c)

    def astype(self, dtype) -> "SsmParams":
        return SsmParams(**{k: T.Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)
                            for k, v in self.tensors().items()})


def dt_rank(D: int) -> int:
    return max(1, math.ceil(D / 16))


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def init_ssm_params(D: int, N: int, rng: np.random.Generator, dtype=np.float32,
                    dt_min: float = 1e-3, dt_max: float = 1e-1, skip: bool = False) -> SsmParams:
    r = dt_rank(D)
    a_log = np.tile(np.log(np.arange(1, N + 1, dtype=np.float64)), (D, 1))
    dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=D))
    std = D ** -0.5
    arrays = dict(
        a_log=a_log,
        w_b=rng.normal(0.0, std, (N, D)),
        w_c=rng.normal(0.0, std, (N, D)),
        w_dt_down=rng.normal(0.0, std, (r, D)),
        w_dt_up=rng.uniform(-r ** -0.5, r ** -0.5, (D, r)) * 0.1,
        dt_bias=inverse_softplus(dt),
    )
    if skip:
        arrays["skip"] = np.ones(D)
    return SsmParams(**{k: T.parameter(v.astype(dtype)) for k, v in arrays.items()})


def ssm_param_count(D: int, N: int, skip: bool = False) -> int:
    r = dt_rank(D)
    return D * N + 2 * N * D + 2 * r * D + D + (D if skip else 0)


# ---------------------------------------------------------------- discretisation

def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def discretize_zoh(a_log, delta, B) -> tuple[np.ndarray, np.ndarray]:
    """``Abar[..., t, d, n] = exp(delta[t, d] * A[d, n])`` and ``Bbar = delta[t, d] * B[t, n]``."""
    a_log, delta, B = _arr(a_log), _arr(delta), _arr(B)
    if np.any(delta <= 0):
        raise DomainError("discretize_zoh: delta must be strictly positive")
    A = -np.exp(a_log)
    abar = np.exp(delta[..., None] * A)
    bbar = delta[..., None] * B[..., None, :]
    return abar, bbar


# ---------------------------------------------------------------- recurrence

def scan_forward(u: np.ndarray, delta: np.ndarray, A: np.ndarray, B: np.ndarray, C: np.ndarray):
    """Run ``h_t = Abar_t * h_{t-1} + Bbar_t * u_t``, ``y_t = <C_t, h_t>`` from ``h_0 = 0``.

    Returns ``(y, cache)``; the cache holds every state for the backward pass.
    """
    L = u.shape[-2]
    if L == 0:
        raise ShapeError("selective scan over an empty sequence")
    abar = np.exp(delta[..., None] * A)
    bx = (delta * u)[..., None] * B[..., None, :]
    hs = np.empty_like(abar)
    h = np.zeros_like(abar[..., 0, :, :])
    for t in range(L):
        h = abar[..., t, :, :] * h + bx[..., t, :, :]
        hs[..., t, :, :] = h
    y = np.einsum("...ldn,...ln->...ld", hs, C)
    return y, (u, delta, A, B, C, abar, hs)


def scan_backward(cache, gy: np.ndarray):
    """Reverse-mode gradients of :func:`scan_forward` w.r.t. ``(u, delta, A, B, C)``."""
    if cache is None:
        raise StateError("scan_backward called without a recorded forward pass")
    u, delta, A, B, C, abar, hs = cache
    L = u.shape[-2]
    gC = np.einsum("...ld,...ldn->...ln", gy, hs)
    gh_all = np.empty_like(hs)
    carry = np.zeros_like(hs[..., 0, :, :])
    for t in range(L - 1, -1, -1):
        carry = carry + gy[..., t, :, None] * C[..., t, None, :]
        gh_all[..., t, :, :] = carry
        carry = carry * abar[..., t, :, :]
    h_prev = np.concatenate([np.zeros_like(hs[..., :1, :, :]), hs[..., :-1, :, :]], axis=-3)
    g_dA = gh_all * h_prev * abar                       # d/d(delta*A)
    g_bx = np.einsum("...ldn,...ln->...ld", gh_all, B)  # d/d(delta*u)
    gdelta = (g_dA * A).sum(-1) + g_bx * u
    gu = g_bx * delta
    gA = (g_dA * delta[..., None]).reshape(-1, *A.shape).sum(0)
    gB = np.einsum("...ldn,...ld->...ln", gh_all, delta * u)
    return gu, gdelta, gA, gB, gC


def scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor) -> Tensor:
    """Tape primitive for the selective recurrence (inputs already projected)."""
    y, cache = scan_forward(u.data, delta.data, A.data, B.data, C.data)
    return T._result(y, (u, delta, A, B, C), lambda g: scan_backward(cache, g), "selective_scan")


def selective_scan(u: Tensor, params: SsmParams) -> Tensor:
    """S6 over ``u`` of shape ``[..., L, D]``; output has the same shape."""
    if u.shape[-2] == 0:
        raise ShapeError("selective scan over an empty sequence")
    delta, B, C = params.project(u)
    y = scan(u, delta, params.A(), B, C)
    if params.skip is not None:
        y = T.add(y, T.mul(u, params.skip))
    return y


def selective_scan_vjp(u, params: SsmParams, cotangent) -> dict[str, np.ndarray]:
    """Gradients of ``<cotangent, selective_scan(u, params)>`` w.r.t. ``u`` and every parameter."""
    ut = Tensor(_arr(u), requires_grad=True)
    leaves = {k: Tensor(v.data, requires_grad=True) for k, v in params.tensors().items()}
    y = selective_scan(ut, SsmParams(**leaves))
    y.backward(np.asarray(cotangent, dtype=y.dtype))
    out = {"u": ut.grad if ut.grad is not None else np.zeros_like(ut.data)}
    for k, leaf in leaves.items():
        out[k] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return out


# ---------------------------------------------------------------- kernel view (verification only)

def _projected(u, params: SsmParams):
    with T.no_grad():
        delta, B, C = params.project(T.as_tensor(u))
    return delta.data, B.data, C.data


def build_selective_kernel(u, params: SsmParams) -> np.ndarray:
    """Materialise the ``[D, L, L]`` lower-triangular operator with ``y[n, d] = sum_m K[d, n, m] u[m, d]``.

    O(L^2) memory; only meant as an oracle for :func:`selective_scan`.
    """
    u = _arr(u)
    if u.ndim != 2 or u.shape[0] == 0:
        raise ShapeError(f"build_selective_kernel expects a non-empty [L, D] sequence, got {u.shape}")
    delta, B, C = _projected(u, params)
    abar, bbar = discretize_zoh(params.a_log, delta, B)   # [L, D, N]
    L, D = u.shape
    K = np.zeros((D, L, L), dtype=u.dtype)
    for n in range(L):
        # prod_{i=m+1}^{n} abar[i] for m = n, n-1, ..., 0
        decay = np.ones((n + 1,) + abar.shape[1:], dtype=abar.dtype)
        if n > 0:
            decay[:n] = np.cumprod(abar[n:0:-1], axis=0)[::-1]
        K[:, n, :n + 1] = np.einsum("k,mdk->dm", C[n], decay * bbar[:n + 1])
    return K


def _check_pair(m: int, n: int, L: int) -> None:
    if m > n:
        raise OrderingError(f"token {m} does not precede token {n}")
    if not 0 <= m <= n < L:
        raise ShapeError(f"token indices ({m}, {n}) outside sequence of length {L}")


def decay_factor(m: int, n: int, u, params: SsmParams) -> np.ndarray:
    """``exp(sum_{i=m+1}^{n} delta_i A)`` per channel and state, shape ``[D, N]``."""
    u = _arr(u)
    _check_pair(m, n, u.shape[0])
    delta, _, _ = _projected(u, params)
    A = -np.exp(params.a_log.data)
    out = np.ones(A.shape, dtype=np.result_type(delta, A))
    for i in range(m + 1, n + 1):
        out = out * np.exp(delta[i][:, None] * A)
    return out


def contribution(m: int, n: int, u, params: SsmParams) -> np.ndarray:
    """Weight of token ``m`` in output ``n``: ``C_n . (decay(m->n) * Bbar_m)`` per channel."""
    u = _arr(u)
    _check_pair(m, n, u.shape[0])
    delta, B, C = _projected(u, params)
    bbar = delta[m][:, None] * B[m][None, :]
    return (decay_factor(m, n, u, params) * bbar * C[n][None, :]).sum(-1)
