"""Scenario files and the end-to-end evaluation run."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field, fields
from itertools import groupby
from pathlib import Path
from typing import Optional

import numpy as np

from .baseline_nn import NnParams, OnlineNnBaseline
from .change import ChangeDetector, DetectorConfig, build_source_tree
from .core import ConfigError, InvalidInputError, NoiseModel, SceneDiffError, compose
from .io import write_ply
from .metrics import compute_metrics
from .registration import RansacConfig
from .simulator import (
    SceneConfig,
    apply_changes,
    generate_scene,
    make_trajectory,
    plan_frames,
    random_offset,
    session_clouds,
    stream_observations,
)

log = logging.getLogger(__name__)

SECTIONS = ("seed", "scene", "changes", "trajectories", "noise", "detector", "baseline")
BUNDLED_DIR = Path(__file__).parent / "scenarios"


@dataclass(frozen=True)
class TrajectoryConfig:
    frames_per_table: int = 10
    arc_deg: float = 100.0
    low_overlap_tables: tuple = ()
    radius: tuple = (0.8, 1.1)
    height: tuple = (0.35, 0.55)
    hfov_deg: float = 70.0
    max_range: float = 1.8
    max_occlusion: float = 0.5
    far_side_penalty: float = 0.1


@dataclass(frozen=True)
class BaselineConfig:
    d: float = 0.002
    r: float = 0.3
    points_per_view: int = 400


@dataclass
class Scenario:
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    changes: list = field(default_factory=list)
    trajectories: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    noise: NoiseModel = field(default_factory=NoiseModel)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    raw: dict = field(default_factory=dict)

    def with_seed(self, seed: int) -> "Scenario":
        raw = copy.deepcopy(self.raw)
        raw["seed"] = seed
        return scenario_from_dict(raw)


def _build(cls, section: dict, name: str, tuple_fields=()):
    if not isinstance(section, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    kwargs = {k: (tuple(v) if k in tuple_fields and isinstance(v, list) else v) for k, v in section.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc


def scenario_from_dict(doc: dict, default_seed: Optional[int] = None) -> Scenario:
    if not isinstance(doc, dict):
        raise ConfigError("scenario must be a JSON object")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown scenario sections: {sorted(unknown)}")
    seed = doc.get("seed", default_seed if default_seed is not None else 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    scene_doc = dict(doc.get("scene", {}))
    if "table_positions" in scene_doc and scene_doc["table_positions"] is not None:
        scene_doc["table_positions"] = tuple(tuple(p) for p in scene_doc["table_positions"])
    scene_doc["seed"] = seed
    scene = _build(SceneConfig, scene_doc, "scene", tuple_fields=("objects_per_table",))
    traj = _build(TrajectoryConfig, doc.get("trajectories", {}), "trajectories",
                  tuple_fields=("low_overlap_tables", "radius", "height"))
    if any(not (0 <= t < scene.n_tables) for t in traj.low_overlap_tables):
        raise ConfigError("low_overlap_tables refers to a missing table")
    noise = _build(NoiseModel, doc.get("noise", {}), "noise")
    det_doc = dict(doc.get("detector", {}))
    ransac_doc = dict(det_doc.pop("ransac", {}))
    ransac_doc.setdefault("seed", seed)
    if "N" in det_doc:
        det_doc["n_correspondences"] = det_doc.pop("N")
    det_doc["ransac"] = _build(RansacConfig, ransac_doc, "detector.ransac")
    detector = _build(DetectorConfig, det_doc, "detector")
    baseline = _build(BaselineConfig, doc.get("baseline", {}), "baseline")
    changes = doc.get("changes", [])
    if not isinstance(changes, list) or not all(isinstance(c, dict) for c in changes):
        raise ConfigError("changes must be a list of objects")
    raw = copy.deepcopy(doc)
    raw["seed"] = seed
    return Scenario(seed, scene, changes, traj, noise, detector, baseline, raw)


def load_scenario(path, default_seed: Optional[int] = None) -> Scenario:
    p = Path(path)
    if not p.exists() and (BUNDLED_DIR / p.name).exists():
        p = BUNDLED_DIR / p.name
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"scenario file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed scenario JSON: {exc}") from exc
    return scenario_from_dict(doc, default_seed)


def bundled_scenarios() -> list[Path]:
    return sorted(BUNDLED_DIR.glob("*.json"))


@dataclass
class SimulatedRun:
    """Everything the simulator produces for one scenario."""

    scenario: Scenario
    source_scene: object
    target_scene: object
    labels: dict
    offset: object
    source_traj: object
    target_traj: object
    source_frames: list
    target_frames: list
    source_measurements: list
    target_measurements: list


def simulate(sc: Scenario) -> SimulatedRun:
    seed = sc.seed
    source_scene = generate_scene(sc.scene)
    target_scene, labels = apply_changes(source_scene, sc.changes, seed)
    tc = sc.trajectories
    traj_kwargs = dict(frames_per_table=tc.frames_per_table, arc_deg=tc.arc_deg,
                       radius=tc.radius, height=tc.height, seed=seed)
    src_traj = make_trajectory(source_scene, "source", tc.low_overlap_tables, **traj_kwargs)
    tgt_traj = make_trajectory(target_scene, "target", tc.low_overlap_tables, **traj_kwargs)
    plan_kwargs = dict(hfov_deg=tc.hfov_deg, max_range=tc.max_range,
                       max_occlusion=tc.max_occlusion, far_side_penalty=tc.far_side_penalty)
    src_frames = plan_frames(source_scene, src_traj, **plan_kwargs)
    tgt_frames = plan_frames(target_scene, tgt_traj, **plan_kwargs)
    offset = random_offset(sc.noise.offset_translation, sc.noise.offset_rotation_deg, [seed, 500])
    src_meas = stream_observations(source_scene, src_traj, sc.noise, "source", seed, frames=src_frames)
    tgt_meas = stream_observations(target_scene, tgt_traj, sc.noise, "target", seed,
                                   offset=offset, frames=tgt_frames)
    return SimulatedRun(sc, source_scene, target_scene, labels, offset, src_traj, tgt_traj,
                        src_frames, tgt_frames, src_meas, tgt_meas)


def run_detector(sim: SimulatedRun, config: Optional[DetectorConfig] = None):
    """Build the source map, stream the target session frame by frame.

    Returns (detector, verdict stream, per-measurement latencies in seconds).
    """
    config = config or sim.scenario.detector
    source_tree = build_source_tree(sim.source_measurements, config)
    det = ChangeDetector(source_tree, config)
    stream = []
    latencies = []
    for _, group in groupby(sim.target_measurements, key=lambda m: m.frame_index):
        frame = list(group)
        t0 = time.perf_counter()
        stream.extend(det.process_frame(frame))
        dt = time.perf_counter() - t0
        latencies.extend([dt / len(frame)] * len(frame))
    stream.extend(det.finalize_removed())
    return det, stream, latencies


def our_detections(det: ChangeDetector, removed: list) -> dict:
    """Collapse instance-level verdicts onto ground-truth object ids."""
    detected: dict[int, bool] = {}
    for oid, v in det.final_verdicts().items():
        label = det.target_tree[oid].label
        detected[label] = detected.get(label, False) or v.changed
    for v in removed:
        label = det.source_tree[v.object_id].label
        detected[label] = True
    return detected


def run_nn(sim: SimulatedRun, params: BaselineConfig, dump_dir: Optional[Path] = None) -> dict:
    seed = sim.scenario.seed
    sigma = sim.scenario.noise.sigma_point
    n = params.points_per_view
    src_by_obj: dict[int, list] = {}
    for _, gid, cloud in session_clouds(sim.source_scene, sim.source_frames, n, [seed, 600], sigma):
        src_by_obj.setdefault(gid, []).append(cloud.points)
    src_by_obj = {g: np.concatenate(v) for g, v in sorted(src_by_obj.items())}
    source_fused = np.concatenate(list(src_by_obj.values())) if src_by_obj else np.zeros((0, 3))
    baseline = OnlineNnBaseline(source_fused, NnParams(params.d, params.r))
    target_points = []
    for frame, gid, cloud in session_clouds(sim.target_scene, sim.target_frames, n, [seed, 601], sigma):
        baseline.process(gid, cloud, frame)
        target_points.append(cloud.points)
    target_fused = np.concatenate(target_points) if target_points else np.zeros((0, 3))
    # Source objects whose spot the target cameras looked at.
    seen = plan_frames(sim.source_scene, sim.target_traj, max_occlusion=1.0, far_side_penalty=0.0,
                       hfov_deg=sim.scenario.trajectories.hfov_deg,
                       max_range=sim.scenario.trajectories.max_range)
    seen_ids = {v.gt_id for fv in seen for v in fv.visible}
    removed = baseline.check_removed({g: c for g, c in src_by_obj.items() if g in seen_ids}, target_fused)
    if dump_dir is not None:
        write_ply(Path(dump_dir) / "source_fused.ply", source_fused)
        write_ply(Path(dump_dir) / "target_fused.ply", target_fused)
    detections = {gid: True for gid in baseline.changed}
    return {
        "params": {"d": params.d, "r": params.r, "points_per_view": n},
        "changed": sorted(baseline.changed),
        "removed": removed,
        "metrics": compute_metrics(detections, sim.labels).to_dict(),
    }


def run_scenario(sc: Scenario, baseline: str = "nn", dump_clouds=None, tree_dump=None) -> dict:
    """Simulate, detect, score. Returns the report as a plain dict.

    Everything outside the ``timing`` section is a pure function of the
    scenario (including its seed).
    """
    if baseline not in ("nn", "none"):
        raise ConfigError(f"unknown baseline {baseline!r}")
    t_start = time.perf_counter()
    sim = simulate(sc)
    t_sim = time.perf_counter()
    det, stream, latencies = run_detector(sim)
    t_det = time.perf_counter()
    for tree in (det.source_tree, det.target_tree):
        tree.check_invariants()
    removed = [v for v in stream if v.kind == "removed"]
    detections = our_detections(det, removed)
    status = "ok" if det.registered else "registration_failed"

    registration = {"attempts": det.registration_attempts, "registered": det.registered}
    if det.registered:
        residual = compose(det.t_rel, sim.offset)
        registration.update({
            "t_rel": det.t_rel.to_dict(),
            "inliers": int(det.inlier_mask.sum()),
            "residual_translation_m": float(np.linalg.norm(residual.translation)),
            "residual_rotation_deg": float(np.degrees(residual.rotation_angle())),
        })

    objects = []
    for gid, label in sim.labels.items():
        objects.append({"gt_id": gid, "label": label, "detected": bool(detections.get(gid, False))})
    report = {
        "status": status,
        "seed": sc.seed,
        "config": sc.raw,
        "ground_truth": {
            "labels": {str(k): v for k, v in sim.labels.items()},
            "offset": sim.offset.to_dict(),
            "n_source_objects": len(sim.source_scene.objects),
            "n_target_objects": len(sim.target_scene.objects),
            "n_source_measurements": len(sim.source_measurements),
            "n_target_measurements": len(sim.target_measurements),
        },
        "registration": registration,
        "ours": {
            "metrics": compute_metrics(detections, sim.labels).to_dict(),
            "objects": objects,
            "verdicts": [
                dict(v.to_dict(), gt_id=(det.target_tree if v.session == "target" else det.source_tree)[
                    v.object_id].label)
                for v in stream
            ],
            "n_source_instances": len(det.source_tree),
            "n_target_instances": len(det.target_tree),
        },
        "nn": None,
    }
    if baseline == "nn":
        report["nn"] = run_nn(sim, sc.baseline, Path(dump_clouds) if dump_clouds else None)
    t_end = time.perf_counter()
    if tree_dump:
        Path(tree_dump).parent.mkdir(parents=True, exist_ok=True)
        Path(tree_dump).write_text(json.dumps(
            {"source": det.source_tree.to_dict(), "target": det.target_tree.to_dict()}, sort_keys=True))
    report["timing"] = {
        "total_s": t_end - t_start,
        "simulate_s": t_sim - t_start,
        "detector_s": t_det - t_sim,
        "baseline_s": t_end - t_det,
        "mean_latency_per_measurement_s": float(np.mean(latencies)) if latencies else 0.0,
        "max_latency_per_measurement_s": float(np.max(latencies)) if latencies else 0.0,
    }
    return report


def deterministic_part(report: dict) -> str:
    """Canonical JSON of a report without its timing section."""
    return json.dumps({k: v for k, v in report.items() if k != "timing"}, sort_keys=True)


__all__ = [
    "Scenario", "TrajectoryConfig", "BaselineConfig", "scenario_from_dict", "load_scenario",
    "bundled_scenarios", "simulate", "run_detector", "run_scenario", "deterministic_part",
    "SceneDiffError", "InvalidInputError",
]
