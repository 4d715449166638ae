import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from cases import brute_args, random_graph_case
from scenediff.change import (
    MOVED,
    NEW_LOCATION,
    NEW_SHAPE,
    REMOVED,
    UNCHANGED,
    ChangeDetector,
    ChangeVerdict,
    DetectorConfig,
    build_object_graph,
    compare_graphs,
)
from scenediff.core import (
    InvalidInputError,
    Measurement,
    ObjectInstance,
    RegistrationFailedError,
    RigidTransform,
)
from scenediff.metrics import compute_metrics
from scenediff.scenario import BUNDLED_DIR, our_detections, run_detector, scenario_from_dict, simulate
from scenediff.spatial_tree import SpatialObjectTree

CODES = np.eye(8) + 0.05  # eight well separated shapes


def obj(i, shape, center):
    return ObjectInstance(i, CODES[shape], center, 0.9)


def table_tree(layout, shapes, offset=(0.0, 0.0, 0.0)):
    tree = SpatialObjectTree()
    for p, s in zip(layout, shapes):
        tree.add_object(CODES[s], np.add(p, offset), 0.9)
    return tree


LAYOUT = [(0.0, 0.0, 0.8), (0.2, 0.05, 0.8), (-0.1, 0.2, 0.8), (0.1, -0.2, 0.8)]


def test_graph_examples():
    o = obj(0, 0, (0, 0, 0))
    g = build_object_graph(o, [o])
    assert g.edges.shape == (0, 3)
    g = build_object_graph(o, [o, obj(1, 1, (1, 0, 0))])
    assert np.array_equal(g.edges, [[1.0, 0.0, 0.0]])
    with pytest.raises(InvalidInputError):
        build_object_graph(o, [obj(1, 1, (1, 0, 0))])


def test_graph_edges_match_subtraction():
    rng = np.random.default_rng(0)
    members = [obj(i, i, rng.uniform(-1, 1, size=3)) for i in range(5)]
    g = build_object_graph(members[2], members)
    expected = [[members[i].center[k] - members[2].center[k] for k in range(3)] for i in (0, 1, 3, 4)]
    assert np.array_equal(g.edges, expected)


def test_graph_with_transform_maps_vertices_first():
    t = RigidTransform.from_rotvec([0, 0, np.pi / 2], [1, 2, 3])
    members = [obj(0, 0, (0, 0, 0)), obj(1, 1, (1, 0, 0))]
    g = build_object_graph(members[0], members, t)
    assert np.allclose(g.edges, [[0.0, 1.0, 0.0]], atol=1e-15)
    assert np.allclose(g.center_position, [1, 2, 3])


def test_compare_identical_graphs():
    members = [obj(i, i, p) for i, p in enumerate(LAYOUT)]
    g = build_object_graph(members[0], members)
    assert compare_graphs(g, g) == UNCHANGED


def test_compare_displaced_center():
    src = [obj(i, i, p) for i, p in enumerate(LAYOUT)]
    moved = [obj(10, 0, np.add(LAYOUT[0], (0.5, 0, 0)))] + [obj(10 + i, i, p) for i, p in enumerate(LAYOUT) if i]
    g_s = build_object_graph(src[0], src)
    g_t = build_object_graph(moved[0], moved)
    assert compare_graphs(g_t, g_s) == "changed"


def test_compare_without_shape_matches_is_changed():
    src = [obj(i, i, p) for i, p in enumerate(LAYOUT)]
    other = [obj(10, 0, LAYOUT[0])] + [obj(10 + i, 4 + i, p) for i, p in enumerate(LAYOUT) if i]
    assert compare_graphs(build_object_graph(other[0], other), build_object_graph(src[0], src)) == "changed"


def test_compare_is_translation_invariant():
    rng = np.random.default_rng(1)
    for _ in range(200):
        g_t, g_s = random_graph_case(rng)
        shift = RigidTransform(np.eye(3), rng.uniform(-5, 5, size=3))
        g_shifted = build_object_graph(g_t.center, [g_t.center] + g_t.neighbors, shift)
        assert np.allclose(g_shifted.edges, g_t.edges, atol=1e-12, rtol=0)
        assert compare_graphs(g_shifted, g_s) == compare_graphs(g_t, g_s)


def test_compare_matches_brute_force():
    rng = np.random.default_rng(2)
    verdicts = set()
    for _ in range(1000):
        g_t, g_s = random_graph_case(rng)
        tc, tn = brute_args(g_t)
        sc, sn = brute_args(g_s)
        want = oracles.compare_graphs_brute(tc, tn, sc, sn, 0.9, 0.03)
        assert compare_graphs(g_t, g_s, 0.9, 0.03) == want
        verdicts.add(want)
    assert verdicts == {UNCHANGED, "changed"}


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.001, 0.2), st.floats(0.0, 0.2))
def test_larger_edge_gate_never_flips_to_changed(seed, delta_e, extra):
    g_t, g_s = random_graph_case(np.random.default_rng(seed))
    if compare_graphs(g_t, g_s, 0.9, delta_e) == UNCHANGED:
        assert compare_graphs(g_t, g_s, 0.9, delta_e + extra) == UNCHANGED


def test_verdict_evidence_must_agree_with_kind():
    ChangeVerdict(0, REMOVED, "never_matched")
    ChangeVerdict(0, UNCHANGED, "singleton_fallback")
    with pytest.raises(InvalidInputError):
        ChangeVerdict(0, UNCHANGED, "never_matched")
    with pytest.raises(InvalidInputError):
        ChangeVerdict(0, MOVED, "made_up")


def detector_on(source_tree, **cfg):
    return ChangeDetector(source_tree, DetectorConfig(**cfg), t_rel=RigidTransform())


def meas(shape, p, q=0.9, frame=0):
    return Measurement(CODES[shape], p, q, frame_index=frame, session="target")


def test_classify_new_location():
    det = detector_on(table_tree(LAYOUT, [0, 1, 2, 3]))
    (v,) = det.process_measurement(meas(0, (5.0, 5.0, 0.8)))
    assert (v.kind, v.evidence) == (NEW_LOCATION, "empty_source_neighborhood")


def test_classify_new_shape():
    det = detector_on(table_tree(LAYOUT, [0, 1, 2, 3]))
    code = np.zeros(8)
    code[[0, 5]] = 1.0  # similarity ~0.5 to every stored shape
    (v,) = det.process_measurement(Measurement(code, (0.0, 0.0, 0.8), 0.9))
    assert (v.kind, v.evidence) == (NEW_SHAPE, "no_shape_match")


def test_translated_layout_is_unchanged():
    source = table_tree(LAYOUT, [0, 1, 2, 3])
    shift = np.array([0.15, -0.1, 0.0])  # far beyond the association distance
    det = detector_on(source)
    ms = [meas(s, np.add(p, shift)) for s, p in enumerate(LAYOUT)]
    verdicts = det.process_frame(ms)
    assert [v.kind for v in verdicts] == [UNCHANGED] * 4
    assert {v.evidence for v in verdicts} == {"consistent_layout"}


def test_moved_object_within_table():
    det = detector_on(table_tree(LAYOUT, [0, 1, 2, 3]))
    moved = list(LAYOUT)
    moved[1] = (0.25, 0.25, 0.8)
    verdicts = {v.object_id: v for v in det.process_frame([meas(s, p) for s, p in enumerate(moved)])}
    assert verdicts[1].kind == MOVED
    assert all(verdicts[i].kind == UNCHANGED for i in (0, 2, 3))


def test_duplicate_instance_does_not_vouch_for_a_move():
    # Shape 1 has two instances 3 cm apart in both maps; the pair moved together.
    source = table_tree(LAYOUT + [(0.23, 0.05, 0.8)], [0, 1, 2, 3, 1])
    det = detector_on(source)
    frame = [meas(0, LAYOUT[0]), meas(2, LAYOUT[2]), meas(3, LAYOUT[3]),
             meas(1, (0.25, 0.25, 0.8)), meas(1, (0.28, 0.25, 0.8))]
    verdicts = det.process_frame(frame)
    kinds = {float(det.target_tree[v.object_id].center[0]): v.kind for v in verdicts}
    assert kinds[0.25] == kinds[0.28] == MOVED
    assert kinds[0.0] == UNCHANGED


def test_singleton_fallback():
    source = table_tree([(0.0, 0.0, 0.8)], [0])
    det = detector_on(source)
    (v,) = det.process_measurement(meas(0, (0.005, 0.0, 0.8)))
    assert (v.kind, v.evidence) == (UNCHANGED, "singleton_fallback")
    det = detector_on(source)
    (v,) = det.process_measurement(meas(0, (0.1, 0.0, 0.8)))
    assert (v.kind, v.evidence) == (MOVED, "singleton_fallback")


def test_removed_objects():
    det = detector_on(table_tree(LAYOUT, [0, 1, 2, 3]))
    det.process_frame([meas(s, p) for s, p in enumerate(LAYOUT)])
    assert det.finalize_removed() == []

    far_table = [(4.0, 4.0, 0.8), (4.2, 4.0, 0.8)]
    det = detector_on(table_tree(LAYOUT[:3] + far_table, [0, 1, 2, 3, 4]))
    det.process_frame([meas(s, p) for s, p in zip((0, 2), (LAYOUT[0], LAYOUT[2]))])
    removed = det.finalize_removed()
    assert [(v.object_id, v.kind, v.evidence, v.session) for v in removed] == [
        (1, REMOVED, "never_matched", "source")]  # objects 3 and 4 were never observed


def test_changed_mark_is_permanent():
    det = detector_on(table_tree(LAYOUT, [0, 1, 2, 3]))
    (v,) = det.process_measurement(meas(5, (9.0, 9.0, 0.8), q=0.5))
    assert v.changed
    assert det.process_measurement(meas(5, (9.0, 9.0, 0.8), q=0.6)) == []
    assert det.target_tree[v.object_id].marked_changed


def test_classify_requires_registration():
    det = ChangeDetector(table_tree(LAYOUT, [0, 1, 2, 3]))
    with pytest.raises(RegistrationFailedError):
        det.classify_object(obj(0, 0, LAYOUT[0]))
    with pytest.raises(InvalidInputError):
        det.process_measurement(Measurement(CODES[0], LAYOUT[0], 0.9, session="source"))


def test_verdicts_wait_for_registration():
    rng = np.random.default_rng(3)
    sites = [(x, y, 0.8) for x in (0.0, 2.0, 4.0) for y in (0.0, 0.2)]
    source = table_tree([np.add(s, (0, 0, 0.1 * i)) for i, s in enumerate(sites)], range(6))
    truth = RigidTransform.from_rotvec(0.05 * rng.standard_normal(3), (0.05, -0.03, 0.02))
    det = ChangeDetector(source, DetectorConfig())
    for i in range(5):
        m = Measurement(CODES[i], truth.inverse().apply(source[i].center), 0.9, frame_index=i)
        assert det.process_measurement(m) == []
    assert det.pending == [0, 1, 2, 3, 4] and not det.registered
    m = Measurement(CODES[5], truth.inverse().apply(source[5].center), 0.9, frame_index=5)
    verdicts = det.process_measurement(m)
    assert det.registered and det.pending == []
    assert [v.kind for v in verdicts] == [UNCHANGED] * 6
    assert np.allclose(det.t_rel.matrix(), truth.matrix(), atol=1e-9)


def test_correspondence_cap_spreads_pairs_over_neighborhoods():
    sites = [(x, y, 0.8) for x in (0.0, 2.0, 4.0) for y in (0.0, 0.2, -0.2)]
    source = SpatialObjectTree()
    codes = np.eye(9) + 0.05
    for i, s in enumerate(sites):
        source.add_object(codes[i], s, 0.9)
    det = ChangeDetector(source, DetectorConfig(max_pairs_per_neighborhood=2))
    for i, s in enumerate(sites):
        det.process_measurement(Measurement(codes[i], s, 0.9, frame_index=i))
    xs = [round(c.source_center[0]) for c in det.correspondences.pairs]
    assert sorted(xs) == [0, 0, 2, 2, 4, 4]
    with pytest.raises(InvalidInputError):
        DetectorConfig(max_pairs_per_neighborhood=0)


def test_zero_noise_unchanged_scene_is_all_unchanged():
    doc = {
        "seed": 3,
        "scene": {"n_tables": 3, "objects_per_table": [3, 4], "n_shapes": 16, "unique_shapes": True},
        "noise": {"sigma_code": 0.0, "sigma_center": 0.0, "offset_translation": 0.0,
                  "offset_rotation_deg": 0.0},
    }
    det, stream, _ = run_detector(simulate(scenario_from_dict(doc)))
    assert det.registered
    assert stream and all(v.kind == UNCHANGED for v in stream)


def test_scripted_scene_matches_ground_truth():
    detector = json.loads((BUNDLED_DIR / "eight_tables.json").read_text())["detector"]
    doc = {
        "seed": 1,
        "scene": {"n_tables": 3, "objects_per_table": [3, 4], "n_shapes": 16, "unique_shapes": True,
                  "primitive_family": "mug"},
        "changes": [{"kind": "add", "table": 0}, {"kind": "move", "table": 1}],
        "detector": detector,
    }
    sim = simulate(scenario_from_dict(doc))
    assert len(sim.source_scene.objects) == 10
    det, stream, _ = run_detector(sim)
    removed = [v for v in stream if v.kind == REMOVED]
    detections = our_detections(det, removed)
    m = compute_metrics(detections, sim.labels)
    assert (m.tp, m.fp, m.fn) == (2, 0, 0)


def test_each_object_changes_at_most_once_and_runs_repeat():
    doc = json.loads((BUNDLED_DIR / "eight_tables.json").read_text())
    sim = simulate(scenario_from_dict(doc))
    _, first, _ = run_detector(sim)
    _, second, _ = run_detector(sim)
    assert [v.to_dict() for v in first] == [v.to_dict() for v in second]
    changed = [(v.session, v.object_id) for v in first if v.changed]
    assert len(changed) == len(set(changed))
