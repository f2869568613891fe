"""Multi-scale 2D scan: one full-resolution route plus routes over a strided map."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .routes import ALL_ROUTES, ScanRoute, flatten, unflatten
from .ssm import SsmParams, init_ssm_params, selective_scan, ssm_param_count
from .tensor import Tensor

KERNEL = 3


@dataclass(frozen=True)
class Ms2dConfig:
    """Route partition between the full-resolution and the stride-``s`` branch.

    ``shared`` means one parameter group per branch; otherwise every route
    owns its own group (``Ms2dConfig(n_full=4, n_down=0, shared=False)`` is
    plain four-group SS2D).
    """

    s: int = 2
    n_full: int = 1
    n_down: int = 3
    shared: bool = True
    routes: tuple[ScanRoute, ...] = field(default=ALL_ROUTES)

    def __post_init__(self):
        if self.s < 1:
            raise ConfigError(f"downsample stride must be >= 1, got {self.s}")
        if self.n_full < 0 or self.n_down < 0 or self.n_full + self.n_down != 4:
            raise ConfigError(f"route split ({self.n_full}, {self.n_down}) must be non-negative and sum to 4")
        if sorted(r.value for r in self.routes) != sorted(r.value for r in ALL_ROUTES):
            raise ConfigError(f"routes must be a permutation of the four scan routes, got {self.routes}")

    @property
    def full_routes(self) -> tuple[ScanRoute, ...]:
        return self.routes[:self.n_full]

    @property
    def down_routes(self) -> tuple[ScanRoute, ...]:
        return self.routes[self.n_full:]

    def down_extent(self, H: int, W: int) -> tuple[int, int]:
        return -(-H // self.s), -(-W // self.s)


SS2D = Ms2dConfig(s=1, n_full=4, n_down=0, shared=False)


@dataclass(frozen=True)
class ScanCost:
    total_tokens: int
    ratio_vs_ss2d: float
    flops: int | None = None


def scan_cost(H: int, W: int, cfg: Ms2dConfig, D: int | None = None, N: int | None = None) -> ScanCost:
    """Tokens scanned by one MS2D layer, relative to four full-resolution scans.

    With ``D`` and ``N`` given, also the S6 cost ``9 * tokens * D * N``.
    """
    L = H * W
    hd, wd = cfg.down_extent(H, W)
    total = cfg.n_full * L + cfg.n_down * hd * wd
    flops = 9 * total * D * N if D is not None and N is not None else None
    return ScanCost(total, total / (4 * L), flops)


def ms2d_param_groups(cfg: Ms2dConfig) -> int:
    if cfg.shared:
        return int(cfg.n_full > 0) + int(cfg.n_down > 0)
    return cfg.n_full + cfg.n_down


def ms2d_param_count(cfg: Ms2dConfig, D: int, N: int) -> int:
    """Learnable scalars of one MS2D layer: depthwise kernels plus S6 groups."""
    kernels = KERNEL * KERNEL * D * (int(cfg.n_full > 0) + int(cfg.n_down > 0))
    return kernels + ms2d_param_groups(cfg) * ssm_param_count(D, N)


def _group_list(p, n: int, shared: bool, branch: str) -> list[SsmParams]:
    if n == 0:
        return []
    if isinstance(p, SsmParams):
        return [p] * n
    p = list(p)
    if shared and len(set(map(id, p))) != 1 or len(p) != n:
        raise ConfigError(f"{branch} branch expects {'one shared group' if shared else n} "
                          f"parameter group(s), got {len(p)}")
    return p


def ms2d_forward(Z: Tensor, cfg: Ms2dConfig, dw1: Tensor | None, dws: Tensor | None,
                 p_full: SsmParams | Sequence[SsmParams] | None,
                 p_down: SsmParams | Sequence[SsmParams] | None,
                 capture: dict | None = None) -> Tensor:
    """MS2D over ``Z`` of shape ``[..., H, W, D]``; returns the same shape.

    ``Z1 = dwconv(Z, dw1)`` is scanned along the full-resolution routes,
    ``Z2 = dwconv(Z, dws, stride=s)`` along the remaining routes as independent
    sequences, and ``Z' = sum_full + interpolate(sum_down)``.
    """
    H, W = Z.shape[-3], Z.shape[-2]
    full = _group_list(p_full, cfg.n_full, cfg.shared, "full-resolution")
    down = _group_list(p_down, cfg.n_down, cfg.shared, "downsampled")
    out = None
    if full:
        z1 = T.dwconv2d(Z, dw1, stride=1, padding=KERNEL // 2)
        if capture is not None:
            capture["z1"] = z1
        for route, p in zip(cfg.full_routes, full):
            y = unflatten(route, selective_scan(flatten(route, z1), p), H, W)
            out = y if out is None else T.add(out, y)
    if down:
        z2 = T.dwconv2d(Z, dws, stride=cfg.s, padding=KERNEL // 2)
        if capture is not None:
            capture["z2"] = z2
        hd, wd = z2.shape[-3], z2.shape[-2]
        acc = None
        for route, p in zip(cfg.down_routes, down):
            y = unflatten(route, selective_scan(flatten(route, z2), p), hd, wd)
            acc = y if acc is None else T.add(acc, y)
        up = T.interpolate_nearest(acc, H, W)
        out = up if out is None else T.add(out, up)
    return out


class Ms2dLayer:
    """Parameters of one MS2D layer over ``D`` channels."""

    def __init__(self, D: int, N: int, cfg: Ms2dConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        std = 1.0 / KERNEL
        self.dw1 = T.parameter(rng.normal(0, std, (KERNEL, KERNEL, D)).astype(dtype)) if cfg.n_full else None
        self.dws = T.parameter(rng.normal(0, std, (KERNEL, KERNEL, D)).astype(dtype)) if cfg.n_down else None
        if cfg.shared:
            self.p_full = init_ssm_params(D, N, rng, dtype) if cfg.n_full else None
            self.p_down = init_ssm_params(D, N, rng, dtype) if cfg.n_down else None
        else:
            self.p_full = [init_ssm_params(D, N, rng, dtype) for _ in range(cfg.n_full)]
            self.p_down = [init_ssm_params(D, N, rng, dtype) for _ in range(cfg.n_down)]

    def groups(self) -> list[SsmParams]:
        out = []
        for p in (self.p_full, self.p_down):
            if isinstance(p, SsmParams):
                out.append(p)
            elif p:
                out.extend(p)
        return out

    def params(self) -> dict[str, Tensor]:
        out = {}
        if self.dw1 is not None:
            out["dw1"] = self.dw1
        if self.dws is not None:
            out["dws"] = self.dws
        for i, g in enumerate(self.groups()):
            for k, v in g.tensors().items():
                out[f"ssm{i}.{k}"] = v
        return out

    def route_params(self, route: ScanRoute) -> tuple[SsmParams, bool]:
        """Parameter group scanning ``route`` and whether that route is downsampled."""
        if route in self.cfg.full_routes:
            i = self.cfg.full_routes.index(route)
            return (self.p_full if self.cfg.shared else self.p_full[i]), False
        i = self.cfg.down_routes.index(route)
        return (self.p_down if self.cfg.shared else self.p_down[i]), True

    def __call__(self, Z: Tensor, capture: dict | None = None) -> Tensor:
        return ms2d_forward(Z, self.cfg, self.dw1, self.dws, self.p_full, self.p_down, capture)


def ideal_ratio(cfg: Ms2dConfig) -> float:
    return (cfg.n_full + cfg.n_down / cfg.s ** 2) / 4

