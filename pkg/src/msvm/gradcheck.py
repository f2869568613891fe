"""Central finite-difference check of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, GradCheckError
from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    per_input: list[float] = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def _loss(fn, arrays, weights):
    with no_grad():
        out = fn(*[Tensor(a) for a in arrays])
    if not np.all(np.isfinite(out.data)):
        return None
    return float(np.sum(out.data * weights))


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
    tol: float = 1e-4,
    *,
    wrt: Sequence[int] | None = None,
    cotangent: str = "random",
    seed: int = 0,
    floor: float = 1e-6,
    name: str | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``sum(w * fn(*inputs))`` with central differences.

    ``cotangent="ones"`` uses the plain sum of outputs; the default draws a
    fixed random ``w`` so ops whose output sum is invariant (normalisation,
    permutations) are still exercised.  Relative error per element is
    ``|g_tape - g_fd| / max(|g_tape|, |g_fd|, floor)``.
    """
    name = name or getattr(fn, "__name__", "op")
    if not 1e-6 <= step <= 1e-3:
        raise DomainError(f"step {step} outside [1e-6, 1e-3]")
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt

    leaves = [Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    out = fn(*leaves)
    if not np.all(np.isfinite(out.data)):
        raise GradCheckError(f"{name}: non-finite forward output")
    rng = np.random.default_rng(seed)
    weights = rng.standard_normal(out.shape) if cotangent == "random" else np.ones(out.shape)
    out.backward(weights)

    per_input = []
    for i in wrt:
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arrays[i])
        if not np.all(np.isfinite(analytic)):
            raise GradCheckError(f"{name}: non-finite tape gradient for input {i}")
        numeric = np.zeros_like(arrays[i])
        flat = arrays[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = _loss(fn, arrays, weights)
            flat[j] = orig - step
            lo = _loss(fn, arrays, weights)
            flat[j] = orig
            if hi is None or lo is None:
                raise GradCheckError(f"{name}: non-finite output while perturbing input {i}[{j}]")
            numeric.reshape(-1)[j] = (hi - lo) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        per_input.append(float(np.max(np.abs(analytic - numeric) / denom)) if numeric.size else 0.0)
    return GradCheckReport(name, max(per_input, default=0.0), per_input)
