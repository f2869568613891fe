"""Desk-scale training on a synthetic oriented-stripe task, and the ablation ladder."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .arch import ArchSpec, Model, count_flops, count_params
from .errors import ConfigError, DivergenceError
from .ms2d import SS2D

log = logging.getLogger(__name__)

MAX_TOY_PARAMS = 2_000_000


@dataclass(frozen=True)
class SyntheticTask:
    """Class ``k`` images are sinusoidal stripes at angle ``k * pi / num_classes``.

    Phase and spatial frequency are random per sample; ``noise`` adds
    Gaussian pixel noise of that standard deviation.
    """

    image_size: tuple[int, int] = (16, 16)
    num_classes: int = 2
    noise: float = 0.0

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        H, W = self.image_size
        labels = rng.integers(0, self.num_classes, n)
        theta = labels * np.pi / self.num_classes
        freq = rng.uniform(2.0, 4.0, n)
        phase = rng.uniform(0, 2 * np.pi, n)
        yy, xx = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
        proj = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
        img = np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
        img = np.repeat(img[..., None], 3, axis=-1)
        if self.noise:
            img = img + self.noise * rng.standard_normal(img.shape)
        return img.astype(np.float32), labels


@dataclass
class Trace:
    loss: list[float] = field(default_factory=list)
    acc: dict[int, float] = field(default_factory=dict)
    eval_loss: dict[int, float] = field(default_factory=dict)
    gradcheck: dict[int, float] = field(default_factory=dict)

    @property
    def initial_loss(self) -> float:
        return self.eval_loss[min(self.eval_loss)]

    @property
    def final_loss(self) -> float:
        return self.eval_loss[max(self.eval_loss)]

    @property
    def final_acc(self) -> float:
        return self.acc[max(self.acc)]


def _evaluate(model: Model, images: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    with T.no_grad():
        logits = model.forward(images)
        loss = T.cross_entropy(logits, labels).item()
    return loss, float((logits.data.argmax(-1) == labels).mean())


def spot_gradcheck(model: Model, images, labels, rng: np.random.Generator,
                   n_entries: int = 3, step: float = 1e-5) -> float:
    """Max relative error between tape and central-difference gradients for a few
    entries of one random parameter tensor, in float64."""
    m64 = model.astype(np.float64)
    x = images.astype(np.float64)
    T.cross_entropy(m64.forward(x), labels).backward()
    name = list(m64.params)[rng.integers(len(m64.params))]
    t = m64.params[name]
    flat = t.data.reshape(-1)
    worst = 0.0
    for j in rng.choice(flat.size, size=min(n_entries, flat.size), replace=False):
        orig = flat[j]
        vals = []
        for sgn in (1, -1):
            flat[j] = orig + sgn * step
            with T.no_grad():
                vals.append(T.cross_entropy(m64.forward(x), labels).item())
        flat[j] = orig
        fd = (vals[0] - vals[1]) / (2 * step)
        g = t.grad.reshape(-1)[j]
        worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), 1e-6))
    return worst


def train_toy(spec: ArchSpec, task: SyntheticTask, steps: int = 500, lr: float = 0.1, seed: int = 0,
              batch_size: int = 8, eval_every: int = 50, n_eval: int = 128,
              gradcheck_every: int = 100) -> Trace:
    """Plain SGD on softmax cross-entropy; deterministic given ``seed``.

    Held-out loss/accuracy are recorded at step 0, every ``eval_every`` steps
    and after the last update (keyed by the number of updates applied).
    """
    if count_params(spec) > MAX_TOY_PARAMS:
        raise ConfigError(f"spec has {count_params(spec)} parameters; train_toy is limited to {MAX_TOY_PARAMS}")
    if spec.num_classes != task.num_classes:
        raise ConfigError(f"spec has {spec.num_classes} classes but task has {task.num_classes}")
    model = Model(spec, seed=seed)
    eval_x, eval_y = task.sample(np.random.default_rng([seed, 1]), n_eval)
    check_rng = np.random.default_rng([seed, 2])
    trace = Trace()
    params = list(model.params.values())

    def record_eval(step):
        trace.eval_loss[step], trace.acc[step] = _evaluate(model, eval_x, eval_y)

    record_eval(0)
    for step in range(steps):
        x, y = task.sample(np.random.default_rng([seed, 0, step]), batch_size)
        for p in params:
            p.grad = None
        loss = T.cross_entropy(model.forward(x), y)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(step, value)
        trace.loss.append(value)
        loss.backward()
        if gradcheck_every and step % gradcheck_every == 0:
            trace.gradcheck[step] = spot_gradcheck(model, x, y, check_rng)
        if lr:
            for p in params:
                if p.grad is not None:
                    p.data -= np.asarray(lr, dtype=p.dtype) * p.grad
        if (step + 1) % eval_every == 0 or step + 1 == steps:
            record_eval(step + 1)
    log.info("train_toy seed=%d: loss %.4f -> %.4f, acc %.3f", seed,
             trace.initial_loss, trace.final_loss, trace.final_acc)
    return trace


def toy_ladder(base: ArchSpec | None = None) -> list[ArchSpec]:
    """Five rungs at toy width: SS2D baseline, then MS2D, SE, ConvFFN, and finally N=1."""
    from .arch import build_arch

    base = base or build_arch("toy")
    n8 = replace(base, N=8)
    return [
        replace(n8, ms2d=SS2D, se=False, convffn=False, gate=True, name="ss2d"),
        replace(n8, se=False, convffn=False, name="+ms2d"),
        replace(n8, convffn=False, name="+se"),
        replace(n8, name="+convffn"),
        replace(base, name="+N=1"),
    ]


def ablation_ladder(configs: list[ArchSpec], task: SyntheticTask, steps: int = 200, lr: float = 0.1,
                    seed: int = 0) -> list[dict]:
    rows = []
    H, W = task.image_size
    for spec in configs:
        trace = train_toy(spec, task, steps=steps, lr=lr, seed=seed, gradcheck_every=0)
        rows.append({
            "name": spec.name,
            "ms2d": spec.ms2d.n_down > 0,
            "se": spec.se,
            "convffn": spec.convffn,
            "N": spec.N,
            "params": count_params(spec),
            "flops": count_flops(spec, H, W),
            "final_loss": trace.final_loss,
            "final_acc": trace.final_acc,
        })
    return rows
