"""Grid <-> sequence scan routes and the four-route 2D selective scan."""
from __future__ import annotations

import enum
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .ssm import SsmParams, selective_scan
from .tensor import Tensor


class ScanRoute(enum.Enum):
    ROW_FWD = "row_fwd"
    ROW_REV = "row_rev"
    COL_FWD = "col_fwd"
    COL_REV = "col_rev"

    @classmethod
    def parse(cls, name: "str | ScanRoute") -> "ScanRoute":
        if isinstance(name, ScanRoute):
            return name
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown scan route {name!r}; choose from {[r.value for r in cls]}") from None


ALL_ROUTES: tuple[ScanRoute, ...] = tuple(ScanRoute)


@lru_cache(maxsize=None)
def route_order(route: ScanRoute, H: int, W: int) -> np.ndarray:
    """Raster index (``p * W + q``) of the token visited at each sequence step."""
    if route in (ScanRoute.ROW_FWD, ScanRoute.ROW_REV):
        order = np.arange(H * W)
    else:
        order = np.arange(H * W).reshape(H, W).T.ravel()
    if route in (ScanRoute.ROW_REV, ScanRoute.COL_REV):
        order = order[::-1]
    order = np.ascontiguousarray(order)
    order.flags.writeable = False
    return order


@lru_cache(maxsize=None)
def route_position(route: ScanRoute, H: int, W: int) -> np.ndarray:
    """Inverse of :func:`route_order`: sequence step of each raster index."""
    pos = np.empty(H * W, dtype=np.intp)
    pos[route_order(route, H, W)] = np.arange(H * W)
    pos.flags.writeable = False
    return pos


def flatten(route: ScanRoute, Z: Tensor) -> Tensor:
    """``[..., H, W, D]`` grid to ``[..., L, D]`` sequence along ``route``."""
    *lead, H, W, D = Z.shape
    if H < 1 or W < 1:
        raise ShapeError(f"flatten needs a non-empty grid, got {H}x{W}")
    return T.take(T.reshape(Z, (*lead, H * W, D)), route_order(route, H, W), -2)


def unflatten(route: ScanRoute, X: Tensor, H: int, W: int) -> Tensor:
    """Inverse of :func:`flatten`."""
    *lead, L, D = X.shape
    if L != H * W:
        raise ShapeError(f"unflatten: sequence length {L} != {H}*{W}")
    return T.reshape(T.take(X, route_position(route, H, W), -2), (*lead, H, W, D))


def _check_coord(pq: Sequence[int], H: int, W: int) -> int:
    p, q = pq
    if not (0 <= p < H and 0 <= q < W):
        raise IndexError(f"coordinate {tuple(pq)} outside {H}x{W} grid")
    return p * W + q


def route_distance(route: ScanRoute, src: Sequence[int], dst: Sequence[int], H: int, W: int) -> int:
    """Sequence index of ``dst`` minus sequence index of ``src`` under ``route``."""
    pos = route_position(route, H, W)
    return int(pos[_check_coord(dst, H, W)] - pos[_check_coord(src, H, W)])


def min_route_distance(routes: Iterable[ScanRoute], src, dst, H: int, W: int) -> int | None:
    """Smallest non-negative route distance from ``src`` to ``dst``.

    Only routes that visit ``src`` no later than ``dst`` count; ``None`` when no
    route in the set reaches ``dst`` from ``src``.
    """
    routes = list(routes)
    if not routes:
        raise ValueError("min_route_distance needs at least one route")
    dists = [d for d in (route_distance(r, src, dst, H, W) for r in routes) if d >= 0]
    return min(dists) if dists else None


def ss2d(Z: Tensor, params: SsmParams | Sequence[SsmParams],
         routes: Sequence[ScanRoute] = ALL_ROUTES) -> Tensor:
    """Sum over routes of ``unflatten(route, selective_scan(flatten(route, Z)))``.

    ``params`` is either one group shared by every route or one group per route.
    """
    if isinstance(params, SsmParams):
        params = [params] * len(routes)
    if len(params) != len(routes):
        raise ValueError(f"{len(routes)} routes but {len(params)} parameter groups")
    H, W = Z.shape[-3], Z.shape[-2]
    out = None
    for route, p in zip(routes, params):
        z = unflatten(route, selective_scan(flatten(route, Z), p), H, W)
        out = z if out is None else T.add(out, z)
    return out
