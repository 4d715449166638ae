"""Targeted trials: opposite-side viewing and post-registration drift.

Both trials hand the detector the true inter-session transform, so they
isolate classification from registration.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import groupby

import numpy as np

from .baseline_nn import OnlineNnBaseline, NnParams
from .change import UNCHANGED, ChangeDetector, build_source_tree
from .core import RigidTransform, compose
from .scenario import scenario_from_dict, simulate
from .simulator import session_clouds


def single_table_scenario(seed: int, n_objects: int = 4, opposite: bool = True) -> dict:
    return {
        "seed": seed,
        "scene": {"n_tables": 1, "objects_per_table": [n_objects, n_objects], "n_shapes": 2 * n_objects,
                  "unique_shapes": True, "primitive_family": "mug"},
        "changes": [],
        "trajectories": {"low_overlap_tables": [0] if opposite else []},
    }


@dataclass(frozen=True)
class OppositeViewResult:
    seed: int
    ours_verdicts: dict        # gt id -> kinds seen across its instances
    ours_all_unchanged: bool
    nn_changed: dict           # gt id -> flagged by the NN baseline
    nn_fraction: dict          # gt id -> largest change-point fraction over its views


def opposite_view_trial(seed: int, n_objects: int = 4, nn: NnParams = NnParams(),
                        points_per_view: int = 400) -> OppositeViewResult:
    """One unchanged table; the target session views it from the far side."""
    sim = simulate(scenario_from_dict(single_table_scenario(seed, n_objects)))
    config = sim.scenario.detector
    det = ChangeDetector(build_source_tree(sim.source_measurements, config), config,
                         t_rel=sim.offset.inverse())
    for _, group in groupby(sim.target_measurements, key=lambda m: m.frame_index):
        det.process_frame(list(group))
    removed = det.finalize_removed()
    kinds: dict[int, set] = {}
    for oid, v in det.final_verdicts().items():
        kinds.setdefault(det.target_tree[oid].label, set()).add(v.kind)
    for v in removed:
        kinds.setdefault(det.source_tree[v.object_id].label, set()).add(v.kind)
    all_unchanged = all(k == {UNCHANGED} for k in kinds.values()) and len(kinds) == n_objects

    src = [c.points for _, _, c in session_clouds(sim.source_scene, sim.source_frames,
                                                  points_per_view, [seed, 600])]
    baseline = OnlineNnBaseline(np.concatenate(src), nn)
    for frame, gid, cloud in session_clouds(sim.target_scene, sim.target_frames, points_per_view,
                                            [seed, 601]):
        baseline.process(gid, cloud, frame)
    flagged = {g: g in baseline.changed for g in sorted(baseline.max_fraction)}
    return OppositeViewResult(seed, {g: sorted(k) for g, k in sorted(kinds.items())}, all_unchanged,
                              flagged, dict(sorted(baseline.max_fraction.items())))


@dataclass(frozen=True)
class DriftResult:
    seed: int
    shift: np.ndarray
    n_with_neighbors: int      # objects whose target and source neighborhoods both have neighbors
    n_baseline_unchanged: int  # of those, graph-unchanged before the shift
    graph_kept: int            # of those, still graph-unchanged after the shift
    objectwise_flipped: int    # of those, called changed by the object-wise rule after the shift


def drift_trial(seed: int, magnitude: float = 0.04, scenario: dict | None = None) -> DriftResult:
    """Unchanged scene; every registered target center is shifted by ``magnitude``.

    The graph comparison only sees center differences and ignores the shift;
    the object-wise rule compares absolute centers and does not.
    """
    doc = dict(scenario or single_table_scenario(seed, 4, opposite=False))
    doc["seed"] = seed
    doc["changes"] = []
    sim = simulate(scenario_from_dict(doc))
    cfg = sim.scenario.detector
    rng = np.random.default_rng([seed, 900])
    direction = rng.standard_normal(3)
    shift = magnitude * direction / np.linalg.norm(direction)
    exact = sim.offset.inverse()
    shifted = compose(RigidTransform(np.eye(3), shift), exact)

    source = build_source_tree(sim.source_measurements, cfg)
    target = build_source_tree(sim.target_measurements, cfg)
    before = ChangeDetector(source, cfg, t_rel=exact)
    after = ChangeDetector(source, cfg, t_rel=shifted)
    before.target_tree = after.target_tree = target
    n = base = kept = flipped = 0
    for o in target.all_objects():
        projected = shifted.apply(o.center)
        if (len(target.query_neighborhood(o.center)) < 2
                or len(source.query_neighborhood(exact.apply(o.center))) < 2
                or len(source.query_neighborhood(projected)) < 2):
            continue
        n += 1
        if before.classify_object(o).kind != UNCHANGED:
            continue
        base += 1
        kept += after.classify_object(o).kind == UNCHANGED
        same = [s for s in source.all_objects()
                if np.linalg.norm(s.center - projected) < cfg.delta_d
                and float(s.unit_code @ o.unit_code) > cfg.delta_s]
        flipped += not same
    return DriftResult(seed, shift, n, base, kept, flipped)
