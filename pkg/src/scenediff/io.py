"""JSON-lines and ASCII PLY helpers."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np

from .core import Measurement, as_points


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_measurements(path, measurements: Iterable[Measurement]) -> None:
    write_jsonl(path, (m.to_dict() for m in measurements))


def read_measurements(path) -> list[Measurement]:
    return [Measurement.from_dict(d) for d in read_jsonl(path)]


def write_ply(path, points) -> None:
    pts = as_points(points)
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(header) + "\n")
        for x, y, z in pts:
            fh.write(f"{x:.6f} {y:.6f} {z:.6f}\n")


def read_ply(path) -> np.ndarray:
    with open(path, encoding="ascii") as fh:
        n = 0
        for line in fh:
            line = line.strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            if line == "end_header":
                break
        rows = [fh.readline().split()[:3] for _ in range(n)]
    return np.asarray(rows, dtype=float).reshape(-1, 3)
