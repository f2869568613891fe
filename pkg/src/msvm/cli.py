"""``msvm`` command line: verify, arch, decay, train-toy, bench."""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ConfigError

log = logging.getLogger("msvm")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
TRAIN_KEYS = {"variant", "arch", "steps", "lr", "batch_size", "seed", "image_size", "num_classes",
              "noise", "eval_every", "n_eval", "gradcheck_every"}


def _json_default(o):
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return None if not math.isfinite(o) else float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _emit(report: dict, out: Path | None, name: str) -> None:
    text = json.dumps(report, indent=2, default=_json_default)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text + "\n")
    print(text)


def _load_spec(variant: str | None, config: str | None):
    from .arch import ArchSpec, build_arch

    if config:
        try:
            data = json.loads(Path(config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config}: invalid JSON ({exc})") from None
        return ArchSpec.from_dict(data), False
    return build_arch(variant or "nano"), True


# ------------------------------------------------------------------ verify

def cmd_verify(args) -> int:
    from .verify import SUITES, run_suites

    names = args.suite or list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ConfigError(f"unknown suite(s) {unknown}; known: {list(SUITES)}")
    report = run_suites(names, seed=args.seed, fault=args.inject_fault)
    scan = next((s for s in report["suites"] if s["name"] == "scan_kernel_equivalence"), None)
    report["scan_vs_kernel_max_abs_diff"] = scan["scan_vs_kernel_max_abs_diff"] if scan else None
    _emit(report, args.out, "verify.json")
    for name in report["failing"]:
        seed = next(s["failing_seed"] for s in report["suites"] if s["name"] == name)
        print(f"FAILED: {name} (seed {seed})", file=sys.stderr)
    return 0 if report["passed"] else 1


# ------------------------------------------------------------------ arch

def arch_report(spec, known: bool, resolution: int = 224) -> dict:
    from .arch import FLOP_TOL, PARAM_TOL, TARGETS, count_flops, count_params

    params, flops = count_params(spec), count_flops(spec, 224, 224)
    report = {"variant": spec.name, "params": params, "flops_224": flops,
              "target_params": None, "target_flops": None, "within_tolerance": None,
              "stage_dims": list(spec.stage_dims), "stage_depths": list(spec.stage_depths)}
    if resolution != 224:
        report[f"flops_{resolution}"] = count_flops(spec, resolution, resolution)
    if known and spec.name in TARGETS:
        tp, tf = TARGETS[spec.name]
        report.update(target_params=tp, target_flops=tf,
                      within_tolerance=abs(params / tp - 1) <= PARAM_TOL and abs(flops / tf - 1) <= FLOP_TOL)
    return report


def cmd_arch(args) -> int:
    spec, known = _load_spec(args.variant, args.config)
    _emit(arch_report(spec, known, args.resolution), args.out, "arch.json")
    return 0


# ------------------------------------------------------------------ decay

def _parse_anchor(text: str, H: int, W: int) -> tuple[int, int]:
    if text == "last":
        return H - 1, W - 1
    if text == "center":
        return H // 2, W // 2
    try:
        p, q = (int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"anchor must be 'last', 'center' or 'p,q', got {text!r}") from None
    if not (0 <= p < H and 0 <= q < W):
        raise ConfigError(f"anchor {(p, q)} outside the {H}x{W} layer grid")
    return p, q


def cmd_decay(args) -> int:
    from . import analysis as A
    from .arch import Model
    from .formats import read_ppm, write_map_csv, write_pgm
    from .routes import ScanRoute

    spec, _ = _load_spec(args.variant, args.config)
    ss_model, ms_model = A.comparison_models(spec, seed=args.seed)
    if args.weights:
        ms_model = Model.load(spec, args.weights)
    if args.image:
        image = read_ppm(args.image)
    else:
        image = A.synthetic_image(args.resolution, args.resolution, seed=args.seed)
    if args.log_decay is not None:
        A.make_uniform_decay(ss_model, args.log_decay)
        A.make_uniform_decay(ms_model, args.log_decay)
    cap = A.capture_layer(ms_model, image, args.layer)
    H, W = cap["input"].shape[-3], cap["input"].shape[-2]
    anchor = _parse_anchor(args.anchor, H, W)
    cmp = A.compare_ms2d_ss2d_decay(ss_model, ms_model, image, anchor, args.layer)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for route, m in cmp["maps"]["ms2d"].items():
        files.append(write_map_csv(out / f"decay_{route.value}.csv", m.values, anchor, route.value))
        files.append(write_pgm(out / f"decay_{route.value}.pgm", m.values, vmax=1.0))
    ra, rb = (ScanRoute.parse(r) for r in args.ratio_routes.split(","))
    maps = cmp["maps"]["ms2d"]
    ratio = A.decay_ratio_map(maps[ra], maps[rb])
    mask, coverage = A.binarize_ratio(ratio, args.tau)
    label = f"{ra.value}/{rb.value}"
    files.append(write_map_csv(out / "ratio.csv", ratio, anchor, label))
    files.append(write_pgm(out / "ratio.pgm", np.log10(np.where(np.isnan(ratio), 1.0, ratio)),
                           vmax=max(math.log10(args.tau) * 2, 1e-12)))
    files.append(write_map_csv(out / "mask.csv", mask.astype(float), anchor, label))
    files.append(write_pgm(out / "mask.pgm", mask.astype(float), vmax=1.0))
    report = {k: v for k, v in cmp.items() if k != "maps"}
    report.update(variant=spec.name, layer=args.layer, tau=args.tau, ratio_routes=label,
                  mask_coverage=coverage, redundancy_ss2d=A.route_redundancy(cmp["maps"]["ss2d"], args.tau),
                  redundancy_ms2d=A.route_redundancy(maps, args.tau),
                  files=[p.name for p in files] + ["comparison.json"])
    _emit(report, out, "comparison.json")
    return 0


# ------------------------------------------------------------------ train-toy

def load_train_config(path: str | None) -> dict:
    cfg = {}
    if path:
        cfg = json.loads(Path(path).read_text())
        if not isinstance(cfg, dict):
            raise ConfigError(f"{path}: top level must be an object")
        unknown = set(cfg) - TRAIN_KEYS
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}; allowed: {sorted(TRAIN_KEYS)}")
        if "variant" in cfg and "arch" in cfg:
            raise ConfigError("give either 'variant' or 'arch', not both")
    return cfg


def cmd_train_toy(args) -> int:
    from .arch import ArchSpec, build_arch, count_params
    from .formats import write_trace_csv
    from .train import SyntheticTask, train_toy

    cfg = load_train_config(args.config)
    if "arch" in cfg:
        spec = ArchSpec.from_dict(cfg["arch"])
    else:
        spec = build_arch(cfg.get("variant", args.variant or "toy"))
    task = SyntheticTask(image_size=tuple(cfg.get("image_size", (16, 16))),
                         num_classes=int(cfg.get("num_classes", spec.num_classes)),
                         noise=float(cfg.get("noise", 0.0)))
    if task.num_classes != spec.num_classes:
        spec = replace(spec, num_classes=task.num_classes)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    trace = train_toy(spec, task, steps=int(cfg.get("steps", 500)), lr=float(cfg.get("lr", 0.1)), seed=seed,
                      batch_size=int(cfg.get("batch_size", 8)), eval_every=int(cfg.get("eval_every", 50)),
                      n_eval=int(cfg.get("n_eval", 128)), gradcheck_every=int(cfg.get("gradcheck_every", 100)))
    args.out.mkdir(parents=True, exist_ok=True)
    write_trace_csv(args.out / "trace.csv", trace.loss, trace.acc)
    report = {"variant": spec.name, "params": count_params(spec), "seed": seed, "steps": len(trace.loss),
              "initial_loss": trace.initial_loss, "final_loss": trace.final_loss, "final_acc": trace.final_acc,
              "eval_loss": trace.eval_loss, "gradcheck_max_rel_err": max(trace.gradcheck.values(), default=None),
              "files": ["trace.csv", "train.json"]}
    _emit(report, args.out, "train.json")
    return 0


# ------------------------------------------------------------------ bench

def _time(fn, repeats: int) -> float:
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_bench(lengths=(2048, 4096), D: int = 16, N: int = 1, grid: int = 32, repeats: int = 5,
              seed: int = 0) -> list[dict]:
    """Best-of-``repeats`` wall time for the selective scan and for one MS2D layer at s=1 and s=2."""
    from . import tensor as T
    from .arch import s6_flops
    from .ms2d import SS2D, Ms2dConfig, Ms2dLayer, scan_cost
    from .ssm import init_ssm_params, selective_scan

    rng = np.random.default_rng(seed)
    rows = []
    p = init_ssm_params(D, N, rng, np.float64)
    with T.no_grad():
        inputs = {L: T.Tensor(rng.standard_normal((L, D))) for L in lengths}
        for u in inputs.values():  # warm allocator and caches before any timed run
            selective_scan(u, p)
        for L, u in inputs.items():
            sec = _time(lambda: selective_scan(u, p), repeats)
            rows.append({"kind": "selective_scan", "L": L, "D": D, "N": N, "s": "", "seconds": sec,
                         "s6_tokens": L, "tokens_per_sec": L / sec, "model_flops": s6_flops(L, D, N)})
        Z = T.Tensor(rng.standard_normal((grid, grid, D)))
        for s, cfg in ((1, SS2D), (2, Ms2dConfig(s=2))):
            layer = Ms2dLayer(D, N, cfg, np.random.default_rng(seed), np.float64)
            layer(Z)
            sec = _time(lambda: layer(Z), repeats)
            tokens = scan_cost(grid, grid, cfg).total_tokens
            rows.append({"kind": "ms2d_forward", "L": grid * grid, "D": D, "N": N, "s": s, "seconds": sec,
                         "s6_tokens": tokens, "tokens_per_sec": grid * grid / sec,
                         "model_flops": s6_flops(tokens, D, N)})
    base = rows[0]["seconds"] / rows[0]["model_flops"]
    for r in rows:
        r["measured_vs_model"] = (r["seconds"] / r["model_flops"]) / base
    return rows


def cmd_bench(args) -> int:
    import csv

    lengths = tuple(int(v) for v in args.lengths.split(","))
    rows = run_bench(lengths, args.D, args.N, args.grid, args.repeats, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "bench.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    scans = {r["L"]: r["seconds"] for r in rows if r["kind"] == "selective_scan"}
    ms = {r["s"]: r for r in rows if r["kind"] == "ms2d_forward"}
    report = {"threads": args.threads, "rows": rows,
              "scan_time_ratio": {f"{b}/{a}": scans[b] / scans[a] for a, b in zip(lengths, lengths[1:])},
              "s2_over_s1_throughput": ms[2]["tokens_per_sec"] / ms[1]["tokens_per_sec"],
              "s2_over_s1_model": ms[1]["s6_tokens"] / ms[2]["s6_tokens"],
              "files": ["bench.csv", "bench.json"]}
    _emit(report, args.out, "bench.json")
    return 0


# ------------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    from .analysis import DEFAULT_TAU
    from .arch import VARIANTS
    from .verify import FAULTS

    ap = argparse.ArgumentParser(prog="msvm", description="Multi-scale 2D selective-scan toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, variant_default):
        p.add_argument("--variant", choices=VARIANTS, default=variant_default)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, default=None)
        return p

    v = sub.add_parser("verify", help="run the oracle and property suites")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", type=Path, default=None)
    v.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    v.add_argument("--inject-fault", choices=FAULTS, default=None, help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)

    a = common(sub.add_parser("arch", help="parameter and FLOP report"), "nano")
    a.add_argument("--config", help="ArchSpec JSON instead of a named variant")
    a.add_argument("--resolution", type=int, default=224)
    a.set_defaults(func=cmd_arch)

    d = common(sub.add_parser("decay", help="decay maps, ratio/mask and SS2D comparison"), "toy")
    d.add_argument("--config", help="ArchSpec JSON instead of a named variant")
    d.add_argument("--weights", help="weight file stem (<stem>.bin + <stem>.json)")
    d.add_argument("--image", help="binary PPM (P6) input; default is a seeded synthetic image")
    d.add_argument("--resolution", type=int, default=64, help="synthetic image side")
    d.add_argument("--layer", default="s1.b1", help="layer id such as s1.b1, or 'last'")
    d.add_argument("--anchor", default="last", help="'last', 'center' or 'p,q' in layer coordinates")
    d.add_argument("--tau", type=float, default=DEFAULT_TAU)
    d.add_argument("--ratio-routes", default="row_fwd,col_fwd")
    d.add_argument("--log-decay", type=float, default=None,
                   help="force uniform delta*A = LOG_DECAY (< 0) in every S6 group")
    d.set_defaults(func=cmd_decay)

    t = sub.add_parser("train-toy", help="train a toy model on the synthetic stripe task")
    t.add_argument("--config", help="JSON with keys " + ", ".join(sorted(TRAIN_KEYS)))
    t.add_argument("--variant", choices=VARIANTS, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", type=Path, default=None)
    t.set_defaults(func=cmd_train_toy)

    b = sub.add_parser("bench", help="time selective_scan and ms2d_forward")
    b.add_argument("--lengths", default="2048,4096")
    b.add_argument("--D", type=int, default=16)
    b.add_argument("--N", type=int, default=1)
    b.add_argument("--grid", type=int, default=32)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", type=Path, default=None)
    b.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("MSVM_LOG", "error").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "out", None) is None and args.command in ("decay", "train-toy", "bench"):
        args.out = Path(f"msvm-{args.command}")
    try:
        return args.func(args)
    except OSError as exc:
        print(f"msvm: I/O error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError) as exc:
        print(f"msvm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
