"""MS3 blocks, the four-stage backbone, and its parameter/FLOP accounting."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .ms2d import KERNEL, SS2D, Ms2dConfig, ms2d_forward, ms2d_param_groups
from .routes import ScanRoute
from .ssm import SsmParams, dt_rank, inverse_softplus
from .tensor import Tensor

STEM_PATCH = 4
DOWN_PATCH = 2

# arch-table targets: (params, FLOPs at 224x224)
TARGETS = {
    "nano": (6.9e6, 0.9e9),
    "micro": (11.9e6, 1.5e9),
    "tiny": (33.0e6, 4.6e9),
}
PARAM_TOL = 0.10
FLOP_TOL = 0.15


@dataclass(frozen=True)
class ArchSpec:
    stem_dim: int
    stage_depths: tuple[int, ...]
    stage_dims: tuple[int, ...]
    N: int = 1
    ms2d: Ms2dConfig = field(default_factory=Ms2dConfig)
    ffn_ratio: int = 2
    ssm_ratio: int = 2
    num_classes: int = 1000
    se: bool = True
    se_ratio: int = 16
    convffn: bool = True
    gate: bool = True
    in_chans: int = 3
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "stage_depths", tuple(self.stage_depths))
        object.__setattr__(self, "stage_dims", tuple(self.stage_dims))
        if len(self.stage_depths) != 4 or len(self.stage_dims) != 4:
            raise ConfigError("stage_depths and stage_dims must both have 4 entries")
        if any(b != 2 * a for a, b in zip(self.stage_dims, self.stage_dims[1:])):
            raise ConfigError(f"stage_dims must double between stages, got {self.stage_dims}")
        if self.stem_dim != self.stage_dims[0]:
            raise ConfigError(f"stem_dim {self.stem_dim} must equal the first stage width {self.stage_dims[0]}")
        if min(self.stage_depths) < 0 or self.N < 1 or self.num_classes < 1:
            raise ConfigError("depths must be >= 0, N >= 1 and num_classes >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_depths"] = list(self.stage_depths)
        d["stage_dims"] = list(self.stage_dims)
        m = self.ms2d
        d["ms2d"] = {"s": m.s, "n_full": m.n_full, "n_down": m.n_down, "shared": m.shared,
                     "routes": [r.value for r in m.routes]}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ArchSpec keys: {sorted(unknown)}")
        d = dict(d)
        if "ms2d" in d and isinstance(d["ms2d"], dict):
            m = dict(d["ms2d"])
            bad = set(m) - {f.name for f in fields(Ms2dConfig)}
            if bad:
                raise ConfigError(f"unknown ms2d keys: {sorted(bad)}")
            if "routes" in m:
                m["routes"] = tuple(ScanRoute.parse(r) for r in m["routes"])
            d["ms2d"] = Ms2dConfig(**m)
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def build_arch(variant: str) -> ArchSpec:
    """Named configurations: the three backbone sizes plus the ablation ladder rungs."""
    v = variant.lower()
    if v == "nano":
        return ArchSpec(48, (1, 2, 5, 2), (48, 96, 192, 384), N=1, name="nano")
    if v == "micro":
        return ArchSpec(64, (1, 2, 5, 2), (64, 128, 256, 512), N=1, name="micro")
    if v == "tiny":
        return ArchSpec(96, (1, 2, 9, 2), (96, 192, 384, 768), N=1, name="tiny")
    base = dict(stem_dim=48, stage_depths=(1, 2, 4, 2), stage_dims=(48, 96, 192, 384), N=8)
    if v == "vmamba-nano":
        return ArchSpec(**base, ms2d=SS2D, se=False, convffn=False, name=v)
    if v == "nano-ms2d":
        return ArchSpec(**base, se=False, convffn=False, name=v)
    if v == "nano-ms2d-se":
        return ArchSpec(**base, convffn=False, name=v)
    if v == "nano-ms2d-se-ffn":
        return ArchSpec(**base, name=v)
    if v == "toy":
        return ArchSpec(8, (1, 1, 1, 1), (8, 16, 32, 64), N=1, num_classes=2, name="toy")
    raise ConfigError(f"unknown architecture variant {variant!r}")


VARIANTS = ("nano", "micro", "tiny", "vmamba-nano", "nano-ms2d", "nano-ms2d-se", "nano-ms2d-se-ffn", "toy")


# ---------------------------------------------------------------- parameter layout

def _ssm_shapes(D: int, N: int) -> dict[str, tuple[int, ...]]:
    r = dt_rank(D)
    return {"a_log": (D, N), "w_b": (N, D), "w_c": (N, D),
            "w_dt_down": (r, D), "w_dt_up": (D, r), "dt_bias": (D,)}


def block_shapes(d: int, spec: ArchSpec) -> dict[str, tuple[int, ...]]:
    """Learnable tensors of one MS3 block of width ``d`` (names relative to the block)."""
    e = spec.ssm_ratio * d
    k = KERNEL
    out = {
        "norm1.g": (d,), "norm1.b": (d,),
        "in_proj.w": (e, d), "in_proj.b": (e,),
        **({"gate_proj.w": (e, d), "gate_proj.b": (e,)} if spec.gate else {}),
        "conv.k": (k, k, e), "conv.b": (e,),
    }
    cfg = spec.ms2d
    if cfg.n_full:
        out["ms2d.dw1"] = (k, k, e)
    if cfg.n_down:
        out["ms2d.dws"] = (k, k, e)
    for g in range(ms2d_param_groups(cfg)):
        for name, shape in _ssm_shapes(e, spec.N).items():
            out[f"ms2d.ssm{g}.{name}"] = shape
    if spec.se:
        r = max(1, e // spec.se_ratio)
        out.update({"se.w1": (r, e), "se.b1": (r,), "se.w2": (e, r), "se.b2": (e,)})
    out.update({"out_proj.w": (d, e), "out_proj.b": (d,)})
    if spec.convffn:
        h = spec.ffn_ratio * d
        out.update({
            "norm2.g": (d,), "norm2.b": (d,),
            "ffn.fc1.w": (h, d), "ffn.fc1.b": (h,),
            "ffn.dw.k": (k, k, h), "ffn.dw.b": (h,),
            "ffn.fc2.w": (d, h), "ffn.fc2.b": (d,),
        })
    return out


def block_ids(spec: ArchSpec) -> Iterator[tuple[str, int, int]]:
    """``(layer_id, stage_index, width)`` for every MS3 block, in forward order."""
    for i, (depth, d) in enumerate(zip(spec.stage_depths, spec.stage_dims)):
        for j in range(depth):
            yield f"s{i + 1}.b{j + 1}", i, d


def param_shapes(spec: ArchSpec) -> dict[str, tuple[int, ...]]:
    out: dict[str, tuple[int, ...]] = {
        "stem.w": (spec.stem_dim, STEM_PATCH * STEM_PATCH * spec.in_chans),
        "stem.b": (spec.stem_dim,),
        "stem.norm.g": (spec.stem_dim,), "stem.norm.b": (spec.stem_dim,),
    }
    for lid, _, d in block_ids(spec):
        out.update({f"{lid}.{k}": v for k, v in block_shapes(d, spec).items()})
    for i in range(3):
        d, d2 = spec.stage_dims[i], spec.stage_dims[i + 1]
        out.update({f"s{i + 1}.down.w": (d2, DOWN_PATCH * DOWN_PATCH * d), f"s{i + 1}.down.b": (d2,),
                    f"s{i + 1}.down.norm.g": (d2,), f"s{i + 1}.down.norm.b": (d2,)})
    dl = spec.stage_dims[-1]
    out.update({"head.norm.g": (dl,), "head.norm.b": (dl,),
                "head.fc.w": (spec.num_classes, dl), "head.fc.b": (spec.num_classes,)})
    return out


def count_params(spec: ArchSpec) -> int:
    return sum(math.prod(s) for s in param_shapes(spec).values())


def _init_tensor(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "a_log":
        return np.tile(np.log(np.arange(1, shape[1] + 1, dtype=np.float64)), (shape[0], 1))
    if leaf == "dt_bias":
        dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=shape))
        return inverse_softplus(dt)
    if leaf == "w_dt_up":
        r = shape[1]
        return rng.uniform(-r ** -0.5, r ** -0.5, shape) * 0.1
    if leaf == "g":
        return np.ones(shape)
    if leaf in ("b", "b1", "b2"):
        return np.zeros(shape)
    if leaf in ("k", "dw1", "dws"):
        return rng.normal(0.0, 1.0 / KERNEL, shape)
    # dense weights [out, in] and B/C/dt projections [*, D]
    return rng.normal(0.0, shape[-1] ** -0.5, shape)


# ---------------------------------------------------------------- forward

def _p(params: dict[str, Tensor], prefix: str, name: str) -> Tensor:
    return params[f"{prefix}{name}"]


def _ssm_group(params: dict[str, Tensor], prefix: str) -> SsmParams:
    return SsmParams(**{k: params[f"{prefix}{k}"] for k in ("a_log", "w_b", "w_c", "w_dt_down", "w_dt_up", "dt_bias")})


def _groups(params: dict[str, Tensor], prefix: str, cfg: Ms2dConfig):
    """Parameter groups for the full and downsampled branches of one block."""
    n = ms2d_param_groups(cfg)
    groups = [_ssm_group(params, f"{prefix}ms2d.ssm{g}.") for g in range(n)]
    if cfg.shared:
        full = groups[0] if cfg.n_full else None
        down = groups[-1] if cfg.n_down else None
        return full, down
    return groups[:cfg.n_full], groups[cfg.n_full:]


@dataclass
class Ms3Block:
    """View of one MS3 block's tensors inside a flat parameter dict."""

    params: dict[str, Tensor]
    prefix: str
    spec: ArchSpec

    @property
    def width(self) -> int:
        return self.params[f"{self.prefix}norm1.g"].shape[0]

    def route_params(self, route: ScanRoute) -> tuple[SsmParams, bool]:
        cfg = self.spec.ms2d
        full, down = _groups(self.params, self.prefix, cfg)
        if route in cfg.full_routes:
            i = cfg.full_routes.index(route)
            return (full if cfg.shared else full[i]), False
        i = cfg.down_routes.index(route)
        return (down if cfg.shared else down[i]), True

    def msvss(self, Z: Tensor, capture: dict | None = None) -> Tensor:
        p, pre, spec = self.params, self.prefix, self.spec
        x = T.layer_norm(Z, _p(p, pre, "norm1.g"), _p(p, pre, "norm1.b"))
        z = T.dense_affine(x, _p(p, pre, "gate_proj.w"), _p(p, pre, "gate_proj.b")) if spec.gate else None
        x = T.dense_affine(x, _p(p, pre, "in_proj.w"), _p(p, pre, "in_proj.b"))
        x = T.silu(T.dwconv2d(x, _p(p, pre, "conv.k"), 1, KERNEL // 2, _p(p, pre, "conv.b")))
        full, down = _groups(p, pre, spec.ms2d)
        y = ms2d_forward(x, spec.ms2d, p.get(f"{pre}ms2d.dw1"), p.get(f"{pre}ms2d.dws"), full, down, capture)
        if spec.se:
            s = T.silu(T.dense_affine(T.global_avg_pool(y), _p(p, pre, "se.w1"), _p(p, pre, "se.b1")))
            s = T.sigmoid(T.dense_affine(s, _p(p, pre, "se.w2"), _p(p, pre, "se.b2")))
            y = T.mul(y, T.reshape(s, s.shape[:-1] + (1, 1, s.shape[-1])))
        if z is not None:
            y = T.mul(y, T.silu(z))
        return T.dense_affine(y, _p(p, pre, "out_proj.w"), _p(p, pre, "out_proj.b"))

    def convffn(self, Z: Tensor) -> Tensor:
        p, pre = self.params, self.prefix
        x = T.layer_norm(Z, _p(p, pre, "norm2.g"), _p(p, pre, "norm2.b"))
        x = T.dense_affine(x, _p(p, pre, "ffn.fc1.w"), _p(p, pre, "ffn.fc1.b"))
        x = T.gelu(T.dwconv2d(x, _p(p, pre, "ffn.dw.k"), 1, KERNEL // 2, _p(p, pre, "ffn.dw.b")))
        return T.dense_affine(x, _p(p, pre, "ffn.fc2.w"), _p(p, pre, "ffn.fc2.b"))

    def __call__(self, Z: Tensor, capture: dict | None = None) -> Tensor:
        return ms3_forward(self, Z, capture)


def ms3_forward(block: Ms3Block, Z: Tensor, capture: dict | None = None) -> Tensor:
    """``Z + MSVSS(norm(Z))`` followed by ``+ ConvFFN(norm(.))`` when enabled."""
    if Z.shape[-1] != block.width:
        raise ShapeError(f"block {block.prefix!r} expects {block.width} channels, got input {Z.shape}")
    Z = T.add(Z, block.msvss(Z, capture))
    if block.spec.convffn:
        Z = T.add(Z, block.convffn(Z))
    return Z


def residual_projection_names(spec: ArchSpec) -> list[str]:
    """Final projection (weight and bias) of every residual branch."""
    names = []
    for lid, _, _ in block_ids(spec):
        names += [f"{lid}.out_proj.w", f"{lid}.out_proj.b"]
        if spec.convffn:
            names += [f"{lid}.ffn.fc2.w", f"{lid}.ffn.fc2.b"]
    return names


class Model:
    """Backbone plus classifier head over a flat, name-sorted parameter dict."""

    def __init__(self, spec: ArchSpec, seed: int = 0, dtype=np.float32,
                 params: dict[str, Tensor] | None = None):
        self.spec = spec
        if params is None:
            rng = np.random.default_rng(seed)
            params = {name: T.parameter(_init_tensor(name, shape, rng).astype(dtype))
                      for name, shape in param_shapes(spec).items()}
        self.params = dict(sorted(params.items()))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Model":
        return Model(self.spec, params={k: T.parameter(v.data.astype(dtype)) for k, v in self.params.items()})

    def num_params(self) -> int:
        return sum(v.data.size for v in self.params.values())

    def block(self, layer_id: str) -> Ms3Block:
        if f"{layer_id}.norm1.g" not in self.params:
            raise KeyError(f"unknown layer {layer_id!r}; known: {self.layer_ids()}")
        return Ms3Block(self.params, f"{layer_id}.", self.spec)

    def layer_ids(self) -> list[str]:
        return [lid for lid, _, _ in block_ids(self.spec)]

    def zero_residual_projections(self) -> None:
        for name in residual_projection_names(self.spec):
            self.params[name].data[...] = 0

    def stage_resolutions(self, H: int, W: int) -> list[tuple[int, int]]:
        return stage_resolutions(H, W)

    def forward(self, images, capture: dict | None = None) -> Tensor:
        """Logits (pre-softmax) for ``[..., H, W, in_chans]`` images.

        ``capture`` (if given) receives, per layer id, the block input and the
        pre-scan MS2D activations ``z1``/``z2``.
        """
        x = T.as_tensor(images)
        H, W = x.shape[-3], x.shape[-2]
        if H < STEM_PATCH or W < STEM_PATCH or x.shape[-1] != self.spec.in_chans:
            raise ShapeError(f"input {x.shape} too small or wrong channel count for a "
                             f"{STEM_PATCH}x{STEM_PATCH} stem over {self.spec.in_chans} channels")
        p = self.params
        x = self._patch_embed(x, "stem", STEM_PATCH)
        for i in range(4):
            for j in range(self.spec.stage_depths[i]):
                lid = f"s{i + 1}.b{j + 1}"
                cap = None
                if capture is not None:
                    cap = capture.setdefault(lid, {})
                    cap["input"] = x
                x = ms3_forward(Ms3Block(p, f"{lid}.", self.spec), x, cap)
            if i < 3:
                x = self._patch_embed(x, f"s{i + 1}.down", DOWN_PATCH)
        x = T.global_avg_pool(x)
        x = T.layer_norm(x, p["head.norm.g"], p["head.norm.b"])
        return T.dense_affine(x, p["head.fc.w"], p["head.fc.b"])

    __call__ = forward

    def _patch_embed(self, x: Tensor, prefix: str, patch: int) -> Tensor:
        p = self.params
        x = T.dense_affine(T.patchify(x, patch), p[f"{prefix}.w"], p[f"{prefix}.b"])
        return T.layer_norm(x, p[f"{prefix}.norm.g"], p[f"{prefix}.norm.b"])

    def save(self, path) -> tuple[Path, Path]:
        return save_weights(self.params, path)

    @classmethod
    def load(cls, spec: ArchSpec, path) -> "Model":
        params = load_weights(path)
        expected = param_shapes(spec)
        got = {k: v.shape for k, v in params.items()}
        if got != expected:
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            raise ShapeError(f"weights do not match spec (missing {missing[:5]}, extra {extra[:5]})")
        return cls(spec, params=params)


def model_forward(spec: ArchSpec, image, seed: int = 0, model: Model | None = None) -> Tensor:
    model = model or Model(spec, seed=seed)
    return model.forward(image)


def stage_resolutions(H: int, W: int) -> list[tuple[int, int]]:
    """Spatial extent seen by each stage's blocks."""
    h, w = -(-H // STEM_PATCH), -(-W // STEM_PATCH)
    out = [(h, w)]
    for _ in range(3):
        h, w = -(-h // DOWN_PATCH), -(-w // DOWN_PATCH)
        out.append((h, w))
    return out


# ---------------------------------------------------------------- FLOPs (MACs)

def block_flops(spec: ArchSpec, d: int, H: int, W: int) -> int:
    """MACs of one MS3 block at ``H x W``: dense/conv layers plus ``9 * tokens * D * N`` per scan."""
    e = spec.ssm_ratio * d
    cfg = spec.ms2d
    L = H * W
    hd, wd = cfg.down_extent(H, W)
    k2 = KERNEL * KERNEL
    f = L * d * e * (2 if spec.gate else 1) + L * k2 * e   # in_proj (+gate), conv
    if cfg.n_full:
        f += L * k2 * e
    if cfg.n_down:
        f += hd * wd * k2 * e
    tokens = cfg.n_full * L + cfg.n_down * hd * wd
    r = dt_rank(e)
    f += tokens * (2 * e * r + 2 * spec.N * e)     # B, C, delta projections
    f += 9 * tokens * e * spec.N                    # selective scan
    if spec.se:
        f += 2 * e * max(1, e // spec.se_ratio)
    f += L * e * d                                  # out_proj
    if spec.convffn:
        h = spec.ffn_ratio * d
        f += 2 * L * d * h + L * k2 * h
    return f


def s6_flops(L: int, D: int, N: int) -> int:
    return 9 * L * D * N


def count_flops(spec: ArchSpec, H: int = 224, W: int = 224) -> int:
    res = stage_resolutions(H, W)
    h0, w0 = res[0]
    f = h0 * w0 * STEM_PATCH * STEM_PATCH * spec.in_chans * spec.stem_dim
    for lid, i, d in block_ids(spec):
        f += block_flops(spec, d, *res[i])
    for i in range(3):
        h, w = res[i + 1]
        f += h * w * DOWN_PATCH * DOWN_PATCH * spec.stage_dims[i] * spec.stage_dims[i + 1]
    f += spec.stage_dims[-1] * spec.num_classes
    return f


# ---------------------------------------------------------------- weights I/O

def save_weights(params: dict[str, Tensor], path) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (f32, concatenated) and ``<path>.json`` (name, shape, byte offset)."""
    path = Path(path)
    bin_path, man_path = path.with_suffix(".bin"), path.with_suffix(".json")
    entries, offset = [], 0
    with open(bin_path, "wb") as fh:
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name].data, dtype="<f4")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    man_path.write_text(json.dumps({"dtype": "f32", "tensors": entries}, indent=1))
    return bin_path, man_path


def load_weights(path) -> dict[str, Tensor]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("dtype") != "f32":
        raise ValueError(f"unsupported weight dtype {manifest.get('dtype')!r}")
    blob = path.with_suffix(".bin").read_bytes()
    out = {}
    for ent in manifest["tensors"]:
        n = math.prod(ent["shape"])
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=ent["offset"]).reshape(ent["shape"])
        out[ent["name"]] = T.parameter(arr.astype(np.float32))
    return out


def with_ms2d(spec: ArchSpec, cfg: Ms2dConfig) -> ArchSpec:
    return replace(spec, ms2d=cfg)
