"""Plain-text and binary map/image formats: decay CSV, PGM (P2), PPM (P6), trace CSV."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

MAP_HEADER = ["H", "W", "anchor_p", "anchor_q", "route"]


def write_map_csv(path, values: np.ndarray, anchor: tuple[int, int], route: str) -> Path:
    """Header line, one metadata line, then ``H`` rows of ``W`` floats."""
    path = Path(path)
    H, W = values.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MAP_HEADER)
        w.writerow([H, W, anchor[0], anchor[1], route])
        for row in values:
            w.writerow([repr(float(v)) for v in row])
    return path


def read_map_csv(path) -> tuple[dict, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != MAP_HEADER:
        raise ValueError(f"{path}: bad header {rows[0]}")
    H, W, p, q, route = rows[1]
    meta = {"H": int(H), "W": int(W), "anchor": (int(p), int(q)), "route": route}
    values = np.array([[float(v) for v in r] for r in rows[2:]], dtype=np.float64)
    if values.shape != (meta["H"], meta["W"]):
        raise ValueError(f"{path}: body shape {values.shape} does not match header {H}x{W}")
    return meta, values


def write_pgm(path, values: np.ndarray, vmax: float | None = None) -> Path:
    """ASCII greyscale; values scaled linearly from ``[0, vmax]`` to ``0..255``, NaN as 0."""
    path = Path(path)
    v = np.asarray(values, dtype=np.float64)
    finite = v[np.isfinite(v)]
    if vmax is None:
        vmax = float(finite.max()) if finite.size and finite.max() > 0 else 1.0
    v = np.where(np.isnan(v), 0.0, np.where(np.isinf(v), vmax, v))
    pix = np.clip(np.rint(v / vmax * 255), 0, 255).astype(int)
    H, W = pix.shape
    lines = ["P2", f"{W} {H}", "255"] + [" ".join(map(str, r)) for r in pix]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_pgm(path) -> np.ndarray:
    tokens = [t for line in Path(path).read_text().splitlines()
              if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pix = np.array(tokens[4:4 + W * H], dtype=int).reshape(H, W)
    if pix.max(initial=0) > maxval:
        raise ValueError(f"{path}: pixel exceeds maxval {maxval}")
    return pix


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6, maxval <= 255) as float ``[H, W, 3]`` in ``[0, 1]``."""
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and chr(data[pos]).isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not chr(data[pos]).isspace():
            pos += 1
        if start == pos:
            raise OSError(f"{path}: truncated PPM header")
        fields.append(data[start:pos].decode("ascii"))
    if fields[0] != "P6":
        raise OSError(f"{path}: not a binary PPM (magic {fields[0]!r})")
    W, H, maxval = map(int, fields[1:])
    if maxval > 255:
        raise OSError(f"{path}: 16-bit PPM is not supported")
    body = data[pos + 1: pos + 1 + W * H * 3]
    if len(body) != W * H * 3:
        raise OSError(f"{path}: expected {W * H * 3} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(H, W, 3).astype(np.float32) / maxval


def write_ppm(path, image: np.ndarray) -> Path:
    path = Path(path)
    pix = np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    H, W, _ = pix.shape
    path.write_bytes(f"P6\n{W} {H}\n255\n".encode("ascii") + pix.tobytes())
    return path


def write_trace_csv(path, loss: list[float], acc: dict[int, float]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "acc"])
        for step, value in enumerate(loss):
            a = acc.get(step)
            w.writerow([step, repr(float(value)), "" if a is None else repr(float(a))])
    return path


def read_trace_csv(path) -> tuple[list[float], dict[int, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["step", "loss", "acc"]:
            raise ValueError(f"{path}: bad header {reader.fieldnames}")
        loss, acc = [], {}
        for row in reader:
            loss.append(float(row["loss"]))
            if row["acc"]:
                acc[int(row["step"])] = float(row["acc"])
    return loss, acc
