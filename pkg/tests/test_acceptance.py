"""The twelve acceptance criteria, each at its stated tolerance.

Every test records one ``PASS``/``FAIL`` line, printed in the terminal
summary (and to stdout when run with ``-s``).
"""
import itertools
import math
import time

import numpy as np
import pytest

import oracles as O
from conftest import ACCEPTANCE_LINES
from msvm import analysis as A
from msvm.arch import TARGETS, Model, build_arch, count_flops, count_params
from msvm.gradcheck import grad_check
from msvm.ms2d import SS2D, Ms2dConfig, Ms2dLayer, ms2d_param_count, ms2d_param_groups, scan_cost
from msvm.routes import ALL_ROUTES, flatten, min_route_distance, route_distance, route_position, ss2d, unflatten
from msvm.ssm import build_selective_kernel, contribution, decay_factor, selective_scan
from msvm.tensor import Tensor, no_grad
from msvm.train import SyntheticTask, train_toy
from msvm.verify import DIFF_OPS, random_params, uniform_params


class Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title

    def __enter__(self):
        self.t0 = time.perf_counter()
        self.detail = ""
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number}: {status}  {self.title}  {self.detail}  ({time.perf_counter() - self.t0:.1f}s)"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return False


def test_01_scan_kernel_equivalence():
    with Criterion(1, "scan == kernel . u, 200 instances, < 1e-8") as c:
        rng = np.random.default_rng(101)
        worst = 0.0
        for _ in range(200):
            L, D, N = int(rng.integers(1, 65)), int(rng.integers(1, 5)), int(rng.integers(1, 9))
            p, u = random_params(rng, D, N), rng.standard_normal((L, D))
            K = build_selective_kernel(u, p)
            worst = max(worst, float(np.abs(selective_scan(Tensor(u), p).data - np.einsum("dnm,md->nd", K, u)).max()))
        # the materialised kernel itself against the explicit product formula
        p, u = random_params(rng, 2, 3), rng.standard_normal((6, 2))
        K = build_selective_kernel(u, p)
        kerr = max(abs(K[d, n, m] - O.kernel_entry(u, p, d, n, m))
                   for d in range(2) for n in range(6) for m in range(n + 1))
        c.detail = f"max|diff|={worst:.2e} kernel-vs-loop={kerr:.2e}"
        assert worst < 1e-8 and kerr < 1e-12


def test_02_gradient_correctness():
    with Criterion(2, "central-FD gradients, >=20 instances per op, < 1e-4") as c:
        worst = {}
        for name, (fn, sampler) in DIFF_OPS.items():
            rng = np.random.default_rng([202, len(name)])
            worst[name] = max(grad_check(fn, sampler(rng), step=1e-5, name=name, seed=i).max_rel_err
                              for i in range(20))
        top = max(worst, key=worst.get)
        c.detail = f"{len(worst)} ops, worst {top}={worst[top]:.2e}"
        assert "selective_scan" in worst and max(worst.values()) < 1e-4


def test_03_route_involution():
    with Criterion(3, "unflatten(flatten(Z)) == Z for H,W in [1,12]") as c:
        n = 0
        for H, W in itertools.product(range(1, 13), repeat=2):
            Z = np.random.default_rng(H * 13 + W).standard_normal((H, W, 3))
            for route in ALL_ROUTES:
                assert np.array_equal(unflatten(route, flatten(route, Tensor(Z)), H, W).data, Z)
                n += 1
        c.detail = f"{n} cases exact"


def test_04_ss2d_symmetry():
    with Criterion(4, "transpose / rot180 equivariance on 6x6, < 1e-10") as c:
        rng = np.random.default_rng(404)
        worst = 0.0
        for _ in range(10):
            p, Z = random_params(rng, 3, 4), rng.standard_normal((6, 6, 3))
            base = ss2d(Tensor(Z), p).data
            tr = ss2d(Tensor(np.ascontiguousarray(Z.transpose(1, 0, 2))), p).data
            rot = ss2d(Tensor(np.ascontiguousarray(Z[::-1, ::-1])), p).data
            worst = max(worst, np.abs(tr - base.transpose(1, 0, 2)).max(), np.abs(rot - base[::-1, ::-1]).max())
        c.detail = f"max err={worst:.2e}"
        assert worst < 1e-10


def test_05_cost_identity():
    with Criterion(5, "scan_cost = 1.75 HW, ratio 0.4375, even H,W <= 64") as c:
        cfg = Ms2dConfig(s=2, n_full=1, n_down=3)
        for H in range(2, 65, 2):
            for W in range(2, 65, 2):
                cost = scan_cost(H, W, cfg)
                assert cost.total_tokens == 1.75 * H * W
                assert cost.ratio_vs_ss2d == 0.4375
        c.detail = "1024 grids exact"


def test_06_param_and_flop_targets():
    with Criterion(6, "params within 10%, FLOPs within 15% of 6.9/11.9/33.0 M and 0.9/1.5/4.6 G") as c:
        parts = []
        for v, (tp, tf) in TARGETS.items():
            p, f = count_params(build_arch(v)), count_flops(build_arch(v), 224, 224)
            parts.append(f"{v} {p / 1e6:.2f}M ({p / tp - 1:+.1%}) {f / 1e9:.3f}G ({f / tf - 1:+.1%})")
            assert abs(p / tp - 1) <= 0.10 and abs(f / tf - 1) <= 0.15
        c.detail = "; ".join(parts)


def test_07_min_route_distance():
    with Criterion(7, "all-pairs min distance on 8x8 vs brute force; adjacent pairs = 1") as c:
        H = W = 8
        tables = {r: {cell: i for i, cell in enumerate(O.route_sequence(r.value, H, W))} for r in ALL_ROUTES}
        cells = [(p, q) for p in range(H) for q in range(W)]
        adjacent = 0
        for a in cells:
            for b in cells:
                fwd = [tables[r][b] - tables[r][a] for r in ALL_ROUTES if tables[r][b] >= tables[r][a]]
                got = min_route_distance(ALL_ROUTES, a, b, H, W)
                assert got == (min(fwd) if fwd else None)
                if abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1:
                    assert got == 1
                    adjacent += 1
        c.detail = f"{len(cells) ** 2} pairs, {adjacent} adjacent"


def test_08_decay_relief():
    with Criterion(8, "strided-route contribution > full-res at d >= s^2; closed form < 1e-12") as c:
        log_decay, s = -0.25, 2
        p = uniform_params(2, log_decay)
        worst, n = 0.0, 0
        for H, W in [(8, 8), (12, 8), (16, 16)]:
            hd, wd = H // s, W // s
            ones_full, ones_down = np.ones((H * W, 2)), np.ones((hd * wd, 2))
            aligned = [(a, b) for a in range(0, H, s) for b in range(0, W, s)]
            for route in ALL_ROUTES:
                pf, pd = route_position(route, H, W), route_position(route, hd, wd)
                for src, dst in itertools.product(aligned, repeat=2):
                    m, k = int(pf[src[0] * W + src[1]]), int(pf[dst[0] * W + dst[1]])
                    if k - m < s * s:
                        continue
                    md = int(pd[src[0] // s * wd + src[1] // s])
                    kd = int(pd[dst[0] // s * wd + dst[1] // s])
                    full = contribution(m, k, ones_full, p)[0]
                    down = contribution(md, kd, ones_down, p)[0]
                    worst = max(worst, abs(full - math.exp(log_decay * (k - m))),
                                abs(down - math.exp(log_decay * (kd - md))))
                    assert down > full
                    n += 1
        c.detail = f"{n} pairs, closed-form err={worst:.1e}"
        assert worst < 1e-12


def test_09_param_sharing():
    with Criterion(9, "MS2D layer: 2 parameter groups, fewer S6 params than 4-group SS2D") as c:
        D, N = 32, 4
        layer = Ms2dLayer(D, N, Ms2dConfig(), np.random.default_rng(9))
        s6_ms = sum(sum(t.data.size for t in g.tensors().values()) for g in layer.groups())
        ss = Ms2dLayer(D, N, SS2D, np.random.default_rng(9))
        s6_ss = sum(sum(t.data.size for t in g.tensors().values()) for g in ss.groups())
        c.detail = f"groups={len(layer.groups())} S6 params {s6_ms} vs {s6_ss}"
        assert ms2d_param_groups(Ms2dConfig()) == 2 and len({id(g) for g in layer.groups()}) == 2
        assert s6_ms < s6_ss
        assert ms2d_param_count(Ms2dConfig(), D, N) < ms2d_param_count(SS2D, D, N)


def test_10_toy_learnability():
    with Criterion(10, "toy task: acc > 0.9 and loss < 0.5x initial in 500 steps, >= 3/5 seeds") as c:
        spec, task = build_arch("toy"), SyntheticTask(image_size=(16, 16), num_classes=2, noise=0.0)
        ok = 0
        parts = []
        for seed in range(5):
            tr = train_toy(spec, task, steps=500, lr=0.1, seed=seed, gradcheck_every=250)
            good = tr.final_acc > 0.9 and tr.final_loss < 0.5 * tr.initial_loss
            ok += good
            parts.append(f"s{seed}:{tr.initial_loss:.2f}->{tr.final_loss:.3f}/{tr.final_acc:.2f}")
            assert max(tr.gradcheck.values()) < 1e-4
        c.detail = f"{ok}/5 seeds ({' '.join(parts)})"
        assert ok >= 3


def test_11_residual_identity():
    with Criterion(11, "zeroed residual output projections make every MS3 block the identity") as c:
        n = 0
        for variant in ("toy", "nano-ms2d-se-ffn", "vmamba-nano"):
            model = Model(build_arch(variant), seed=11, dtype=np.float64)
            model.zero_residual_projections()
            rng = np.random.default_rng(11)
            for lid in model.layer_ids():
                d = model.block(lid).width
                Z = rng.standard_normal((1, 5, 4, d))
                with no_grad():
                    assert np.array_equal(model.block(lid)(Tensor(Z)).data, Z)
                n += 1
        c.detail = f"{n} blocks exact"


def test_12_decay_map_oracle():
    with Criterion(12, "decay map == contribution decay factor pointwise on 8x8, < 1e-12") as c:
        worst, n = 0.0, 0
        # synthetic grids
        rng = np.random.default_rng(12)
        for _ in range(3):
            p, Z = random_params(rng, 3, 2), rng.standard_normal((8, 8, 3))
            for route in ALL_ROUTES:
                anchor = (int(rng.integers(8)), int(rng.integers(8)))
                m = A.decay_map_from_grid(Z, p, route, anchor)
                pos, u = route_position(route, 8, 8), flatten(route, Tensor(Z)).data
                k = int(pos[anchor[0] * 8 + anchor[1]])
                for a, b in itertools.product(range(8), repeat=2):
                    j = int(pos[a * 8 + b])
                    ref = decay_factor(j, k, u, p).mean() if j <= k else 0.0
                    worst = max(worst, abs(m.values[a, b] - ref))
                    n += 1
        # through a model layer: the full-resolution route at 32px and the strided routes at 64px are 8x8
        model = Model(build_arch("toy"), seed=12, dtype=np.float64)
        for res in (32, 64):
            img = A.synthetic_image(res, res, seed=res)
            cap = A.capture_layer(model, img, "s1.b1")
            block = model.block("s1.b1")
            for route in ALL_ROUTES:
                params, down = block.route_params(route)
                grid = cap["z2" if down else "z1"].data
                if grid.shape[:2] != (8, 8):
                    continue
                s = model.spec.ms2d.s if down else 1
                anchor_full = (7 * s, 5 * s)
                m = A.decay_map(model, img, "s1.b1", route, anchor_full, captured=cap)
                assert m.shape == (8, 8)
                pos, u = route_position(route, 8, 8), flatten(route, Tensor(grid)).data
                k = int(pos[7 * 8 + 5])
                for a, b in itertools.product(range(8), repeat=2):
                    j = int(pos[a * 8 + b])
                    ref = decay_factor(j, k, u, params).mean() if j <= k else 0.0
                    worst = max(worst, abs(m.values[a, b] - ref))
                    n += 1
        c.detail = f"{n} cells, max err={worst:.1e}"
        assert worst < 1e-12
