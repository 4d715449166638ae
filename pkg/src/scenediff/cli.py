"""Command-line entry point: ``scenediff run | run-batch | simulate``.

Exit codes: 0 success, 2 configuration error, 3 internal invariant violation.
A registration that never succeeds is not an error; the report carries
``status: registration_failed`` instead.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .core import InvariantViolation, SceneDiffError
from .io import write_jsonl, write_measurements
from .scenario import load_scenario, run_scenario, simulate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3
SEED_ENV = "SCENE_DIFF_SEED"

log = logging.getLogger("scenediff")


class SceneDiffConfigArg(SceneDiffError):
    """Bad command-line or environment input."""


def _env_seed() -> Optional[int]:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        seed = int(raw)
    except ValueError:
        raise SceneDiffConfigArg(f"{SEED_ENV} must be an integer, got {raw!r}")
    if seed < 0:
        raise SceneDiffConfigArg(f"{SEED_ENV} must be non-negative")
    return seed


def _load(path: str, seed: Optional[int]):
    """Seed precedence: --seed, then the scenario file, then the environment, then 0."""
    sc = load_scenario(path, default_seed=_env_seed())
    return sc.with_seed(seed) if seed is not None else sc


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _summary(report: dict) -> str:
    ours = report["ours"]["metrics"]
    line = (f"seed={report['seed']} status={report['status']} "
            f"ours P={ours['precision']:.3f} R={ours['recall']:.3f}")
    if report.get("nn"):
        nn = report["nn"]["metrics"]
        line += f" nn P={nn['precision']:.3f} R={nn['recall']:.3f}"
    return line


def cmd_run(args) -> int:
    sc = _load(args.scenario, args.seed)
    report = run_scenario(sc, baseline=args.baseline, dump_clouds=args.dump_clouds,
                          tree_dump=args.tree_dump)
    if args.out:
        out = Path(args.out)
        _write_json(out, report)
        write_jsonl(out.with_suffix(".verdicts.jsonl"), report["ours"]["verdicts"])
        print(_summary(report))
    else:
        for v in report["ours"]["verdicts"]:
            print(json.dumps(v, sort_keys=True))
        print(_summary(report), file=sys.stderr)
    return EXIT_OK


def _batch_job(job: tuple) -> dict:
    path, seed, baseline = job
    sc = load_scenario(path, default_seed=_env_seed())
    if seed is not None:
        sc = sc.with_seed(seed)
    return run_scenario(sc, baseline=baseline)


def _parse_seeds(text: Optional[str]) -> list:
    if not text:
        return [None]
    seeds = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    return seeds


def cmd_run_batch(args) -> int:
    try:
        seeds = _parse_seeds(args.seeds)
    except ValueError:
        raise SceneDiffConfigArg(f"cannot parse --seeds {args.seeds!r}")
    jobs = [(path, seed, args.baseline) for path in args.scenarios for seed in seeds]
    # Fail fast on unreadable scenarios before spawning workers.
    for path in args.scenarios:
        load_scenario(path)
    if args.workers == 1:
        reports = [_batch_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            reports = list(pool.map(_batch_job, jobs))
    rows = []
    for (path, _, _), report in zip(jobs, reports):
        print(f"{Path(path).name} {_summary(report)}")
        rows.append((Path(path).stem, report))
        if args.out_dir:
            _write_json(Path(args.out_dir) / f"{Path(path).stem}.seed{report['seed']}.json", report)
    ours_p = np.mean([r["ours"]["metrics"]["precision"] for _, r in rows])
    ours_r = np.mean([r["ours"]["metrics"]["recall"] for _, r in rows])
    line = f"mean over {len(rows)} runs: ours P={ours_p:.3f} R={ours_r:.3f}"
    if args.baseline == "nn":
        nn_p = np.mean([r["nn"]["metrics"]["precision"] for _, r in rows])
        nn_r = np.mean([r["nn"]["metrics"]["recall"] for _, r in rows])
        line += f" nn P={nn_p:.3f} R={nn_r:.3f}"
    print(line)
    return EXIT_OK


def cmd_simulate(args) -> int:
    sc = _load(args.scenario, args.seed)
    sim = simulate(sc)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_measurements(out / "source.jsonl", sim.source_measurements)
    write_measurements(out / "target.jsonl", sim.target_measurements)
    _write_json(out / "ground_truth.json", {
        "seed": sc.seed,
        "labels": {str(k): v for k, v in sim.labels.items()},
        "offset": sim.offset.to_dict(),
        "source_scene": sim.source_scene.to_dict(),
        "target_scene": sim.target_scene.to_dict(),
    })
    print(f"wrote {len(sim.source_measurements)} source and {len(sim.target_measurements)} "
          f"target measurements to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scenediff", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate, detect and score one scenario")
    run.add_argument("scenario", help="scenario JSON (bundled names such as eight_tables.json work too)")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--out", default=None,
                     help="report path; verdicts go next to it as .verdicts.jsonl")
    run.add_argument("--baseline", choices=("nn", "none"), default="nn")
    run.add_argument("--dump-clouds", default=None, metavar="DIR", help="write fused NN clouds as PLY")
    run.add_argument("--tree-dump", default=None, metavar="PATH", help="write both object trees as JSON")
    run.add_argument("--verbose", "-v", action="store_true")
    run.set_defaults(func=cmd_run)

    batch = sub.add_parser("run-batch", help="run several scenarios and seeds in parallel")
    batch.add_argument("scenarios", nargs="+")
    batch.add_argument("--seeds", default=None, help="e.g. 0-9 or 1,4,7")
    batch.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    batch.add_argument("--baseline", choices=("nn", "none"), default="nn")
    batch.add_argument("--out-dir", default=None)
    batch.add_argument("--verbose", "-v", action="store_true")
    batch.set_defaults(func=cmd_run_batch)

    simp = sub.add_parser("simulate", help="write the measurement streams and ground truth")
    simp.add_argument("scenario")
    simp.add_argument("--seed", type=int, default=None)
    simp.add_argument("--out-dir", required=True)
    simp.add_argument("--verbose", "-v", action="store_true")
    simp.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", None) is not None and args.seed < 0:
        parser.error("--seed must be non-negative")
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be positive")
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except SceneDiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
