"""Decay maps along scan routes, their ratios, and the SS2D vs MS2D comparison."""
from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import combinations

import numpy as np

from . import tensor as T
from .arch import Model
from .errors import ShapeError
from .ms2d import SS2D
from .routes import ALL_ROUTES, ScanRoute, route_position
from .ssm import SsmParams, inverse_softplus

DEFAULT_TAU = 10.0
DEFAULT_RADII = (1, 2, 4, 8)


@dataclass
class DecayMap:
    """Mean ``exp(sum delta_i A)`` from every cell to ``anchor`` on the grid a route scans.

    Cells scanned after the anchor are 0 with ``causal`` False.  ``scale`` is
    the stride between this grid and the layer's full-resolution grid.
    """

    values: np.ndarray
    causal: np.ndarray
    anchor: tuple[int, int]
    route: ScanRoute
    layer_id: str = ""
    scale: int = 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def upsample(self, H: int, W: int, anchor: tuple[int, int] | None = None) -> "DecayMap":
        """Nearest-neighbour copy onto ``H x W`` (same index rule as MS2D's merge)."""
        h, w = self.shape
        ih, iw = T.nearest_index(H, h), T.nearest_index(W, w)
        return DecayMap(self.values[np.ix_(ih, iw)], self.causal[np.ix_(ih, iw)],
                        anchor if anchor is not None else self.anchor, self.route, self.layer_id, 1)


def sequence_decay(u: np.ndarray, params: SsmParams, n: int) -> np.ndarray:
    """For each ``m <= n``: mean over channels and states of ``exp(sum_{i=m+1}^{n} delta_i A)``."""
    with T.no_grad():
        delta, _, _ = params.project(T.as_tensor(u))
    A = -np.exp(params.a_log.data)
    logs = np.cumsum(delta.data[:n + 1, :, None] * A, axis=0)     # [n+1, D, N]
    return np.exp(logs[n] - logs).mean(axis=(1, 2))


def decay_map_from_grid(Z: np.ndarray, params: SsmParams, route: ScanRoute,
                        anchor: tuple[int, int], layer_id: str = "", scale: int = 1) -> DecayMap:
    """Decay map for a single ``[H, W, D]`` pre-scan activation."""
    if Z.ndim != 3:
        raise ShapeError(f"expected one [H, W, D] feature map, got {Z.shape}")
    H, W, D = Z.shape
    p, q = anchor
    if not (0 <= p < H and 0 <= q < W):
        raise IndexError(f"anchor {anchor} outside {H}x{W} grid")
    pos = route_position(route, H, W)
    order = np.argsort(pos)
    u = Z.reshape(H * W, D)[order]
    n = int(pos[p * W + q])
    seq = np.zeros(H * W, dtype=np.float64)
    seq[:n + 1] = sequence_decay(u, params, n)
    values = seq[pos].reshape(H, W)
    causal = (pos <= n).reshape(H, W)
    return DecayMap(values, causal, (p, q), route, layer_id, scale)


def _resolve_layer(model: Model, layer_id: str) -> str:
    ids = model.layer_ids()
    if layer_id in ("last", "", None):
        return ids[-1]
    if layer_id not in ids:
        raise KeyError(f"unknown layer {layer_id!r}; known: {ids}")
    return layer_id


def capture_layer(model: Model, image, layer_id: str) -> dict:
    cap: dict = {}
    with T.no_grad():
        model.forward(image, capture=cap)
    return cap[_resolve_layer(model, layer_id)]


def decay_map(model: Model, image, layer_id: str, route: ScanRoute,
              anchor: tuple[int, int], captured: dict | None = None) -> DecayMap:
    """Decay map of ``route`` at ``layer_id`` for one ``[H, W, 3]`` image.

    ``anchor`` is in the layer's full-resolution coordinates; for a
    downsampled route it is mapped onto the strided grid and the map is
    returned at that resolution (see :meth:`DecayMap.upsample`).
    """
    layer_id = _resolve_layer(model, layer_id)
    cap = captured if captured is not None else capture_layer(model, image, layer_id)
    params, down = model.block(layer_id).route_params(route)
    if down:
        s = model.spec.ms2d.s
        return decay_map_from_grid(cap["z2"].data, params, route, (anchor[0] // s, anchor[1] // s), layer_id, s)
    return decay_map_from_grid(cap["z1"].data, params, route, anchor, layer_id, 1)


def decay_ratio_map(a: DecayMap, b: DecayMap) -> np.ndarray:
    """``max(a/b, b/a)`` where both maps are causal; NaN elsewhere."""
    if a.shape != b.shape or a.anchor != b.anchor:
        raise ValueError(f"maps differ in shape or anchor: {a.shape}@{a.anchor} vs {b.shape}@{b.anchor}")
    present = a.causal & b.causal
    out = np.full(a.shape, np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        va, vb = a.values[present], b.values[present]
        out[present] = np.maximum(va / vb, vb / va)
    return out


def binarize_ratio(ratio: np.ndarray, tau: float = DEFAULT_TAU) -> tuple[np.ndarray, float]:
    """Mask of ``ratio >= tau`` and its mean over present (non-NaN) cells."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    present = ~np.isnan(ratio)
    mask = np.zeros(ratio.shape, dtype=np.uint8)
    mask[present] = ratio[present] >= tau
    coverage = float(mask[present].mean()) if present.any() else 0.0
    return mask, coverage


def radial_means(m: DecayMap, radii=DEFAULT_RADII) -> dict[int, float | None]:
    """Mean decay over causal cells at each Chebyshev radius from the anchor."""
    H, W = m.shape
    pp, qq = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    cheb = np.maximum(np.abs(pp - m.anchor[0]), np.abs(qq - m.anchor[1]))
    out = {}
    for r in radii:
        sel = (cheb == r) & m.causal
        out[r] = float(m.values[sel].mean()) if sel.any() else None
    return out


def route_redundancy(maps: dict[ScanRoute, DecayMap], tau: float = DEFAULT_TAU) -> dict[str, float]:
    """Binarised ratio coverage for every pair of routes."""
    out = {}
    for ra, rb in combinations(maps, 2):
        _, cov = binarize_ratio(decay_ratio_map(maps[ra], maps[rb]), tau)
        out[f"{ra.value}/{rb.value}"] = cov
    return out


def route_maps(model: Model, image, layer_id: str = "last",
               anchor: tuple[int, int] | None = None) -> dict[ScanRoute, DecayMap]:
    """Per-route decay maps at full layer resolution (downsampled routes upsampled)."""
    layer_id = _resolve_layer(model, layer_id)
    cap = capture_layer(model, image, layer_id)
    H, W = cap["input"].shape[-3], cap["input"].shape[-2]
    anchor = anchor if anchor is not None else (H - 1, W - 1)
    out = {}
    for route in ALL_ROUTES:
        m = decay_map(model, image, layer_id, route, anchor, captured=cap)
        out[route] = m.upsample(H, W, anchor) if m.scale != 1 else m
    return out


def compare_ms2d_ss2d_decay(ss2d_model: Model, ms2d_model: Model, image,
                            anchor: tuple[int, int] | None = None, layer_id: str = "last",
                            radii=DEFAULT_RADII) -> dict:
    """Per-route decay of an SS2D and an MS2D model at the same layer and anchor.

    Defaults to the last token of the last layer.  Downsampled MS2D maps are
    upsampled before radial averaging.
    """
    ss = route_maps(ss2d_model, image, layer_id, anchor)
    ms = route_maps(ms2d_model, image, layer_id, anchor)
    anchor = next(iter(ss.values())).anchor
    report = {"anchor": list(anchor), "grid": list(next(iter(ss.values())).shape),
              "radii": list(radii), "routes": {}}
    down = set(ms2d_model.spec.ms2d.down_routes)
    for route in ALL_ROUTES:
        report["routes"][route.value] = {
            "downsampled_in_ms2d": route in down,
            "ss2d": radial_means(ss[route], radii),
            "ms2d": radial_means(ms[route], radii),
        }
    report["maps"] = {"ss2d": ss, "ms2d": ms}
    return report


def comparison_models(spec, seed: int = 0) -> tuple[Model, Model]:
    """An SS2D twin (four independent groups) and the MS2D model, both from ``seed``."""
    return Model(replace(spec, ms2d=SS2D), seed=seed), Model(spec, seed=seed)


def make_uniform_decay(model: Model, log_decay: float) -> Model:
    """Force every S6 group to ``delta = 1`` and ``A = log_decay`` (so ``delta * A`` is uniform)."""
    if log_decay >= 0:
        raise ValueError("log_decay must be negative")
    for name, t in model.params.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "a_log":
            t.data[...] = np.log(-log_decay)
        elif leaf in ("w_dt_down", "w_dt_up"):
            t.data[...] = 0
        elif leaf == "dt_bias":
            t.data[...] = inverse_softplus(np.ones(1))[0]
    return model


def synthetic_image(H: int, W: int, seed: int = 0) -> np.ndarray:
    """Smooth random RGB image in ``[0, 1]`` (sum of a few random plane waves)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
    img = np.zeros((H, W, 3))
    for _ in range(4):
        f = rng.uniform(0.5, 4.0, 2)
        phase = rng.uniform(0, 2 * np.pi, 3)
        img += np.sin(2 * np.pi * (f[0] * yy + f[1] * xx)[..., None] + phase)
    img = (img - img.min()) / (img.max() - img.min() + 1e-12)
    return img.astype(np.float32)
