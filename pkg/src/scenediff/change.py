"""Online change classification of target-session objects against a source map."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import InvalidInputError, Measurement, ObjectInstance, RegistrationFailedError, RigidTransform
from .registration import (
    Correspondence,
    CorrespondenceSet,
    RansacConfig,
    best_shape_match,
    ransac_register,
)
from .spatial_tree import SpatialObjectTree

UNCHANGED = "unchanged"
NEW_LOCATION = "changed_new_location"
NEW_SHAPE = "changed_new_shape"
MOVED = "changed_moved"
REMOVED = "removed"
CHANGED_KINDS = (NEW_LOCATION, NEW_SHAPE, MOVED, REMOVED)

EVIDENCE = {
    "empty_source_neighborhood": NEW_LOCATION,
    "no_shape_match": NEW_SHAPE,
    "all_edges_differ": MOVED,
    "singleton_fallback": None,  # either unchanged or changed_moved
    "consistent_layout": UNCHANGED,
    "never_matched": REMOVED,
}


@dataclass(frozen=True)
class ChangeVerdict:
    object_id: int
    kind: str
    evidence: str
    frame_index: int = -1
    session: str = "target"

    def __post_init__(self):
        expected = EVIDENCE.get(self.evidence, "missing")
        if expected == "missing":
            raise InvalidInputError(f"unknown evidence {self.evidence!r}")
        if expected is None:
            ok = self.kind in (UNCHANGED, MOVED)
        else:
            ok = self.kind == expected
        if not ok:
            raise InvalidInputError(f"evidence {self.evidence!r} inconsistent with {self.kind!r}")

    @property
    def changed(self) -> bool:
        return self.kind != UNCHANGED

    def to_dict(self) -> dict:
        return {
            "object_id": self.object_id,
            "session": self.session,
            "kind": self.kind,
            "evidence": self.evidence,
            "frame_index": self.frame_index,
        }


@dataclass
class ObjectGraph:
    center: ObjectInstance
    vertices: list
    center_position: np.ndarray
    positions: np.ndarray  # (n, 3) vertex centers used for the edges
    edges: np.ndarray      # (n - 1, 3) center -> neighbor vectors
    neighbors: list        # vertices other than the center, aligned with ``edges``


def build_object_graph(
    o: ObjectInstance,
    neighborhood: Sequence[ObjectInstance],
    transform: Optional[RigidTransform] = None,
) -> ObjectGraph:
    """Star graph from ``o`` to every other member of its neighborhood.

    With ``transform`` the vertex centers are first mapped through it (used to
    express target objects in the source frame).
    """
    if not any(v.id == o.id for v in neighborhood):
        raise InvalidInputError("the center object must belong to its neighborhood")
    vertices = sorted(neighborhood, key=lambda v: v.id)
    pos = np.array([v.center for v in vertices], dtype=float)
    if transform is not None:
        pos = transform.apply(pos)
    ci = next(i for i, v in enumerate(vertices) if v.id == o.id)
    others = [i for i in range(len(vertices)) if i != ci]
    edges = pos[others] - pos[ci]
    return ObjectGraph(o, vertices, pos[ci], pos, edges.reshape(-1, 3), [vertices[i] for i in others])


def edge_correspondences(g_target: ObjectGraph, g_source: ObjectGraph, delta_s: float) -> list:
    """For each target edge, the source edge whose endpoint is most shape-similar.

    Returns (target_edge_index, source_edge_index) pairs. One source edge may
    serve several target edges.
    """
    if not g_target.neighbors or not g_source.neighbors:
        return []
    tu = np.stack([v.unit_code for v in g_target.neighbors])
    su = np.stack([v.unit_code for v in g_source.neighbors])
    sim = tu @ su.T
    out = []
    for j in range(len(tu)):
        jp = int(np.argmax(sim[j]))  # first index on exact ties
        if sim[j, jp] > delta_s:
            out.append((j, jp))
    return out


def compare_graphs(
    g_target: ObjectGraph, g_source: ObjectGraph, delta_s: float = 0.9, delta_e: float = 0.03
) -> str:
    """``unchanged`` if at least one corresponded edge pair differs by <= delta_e."""
    for j, jp in edge_correspondences(g_target, g_source, delta_s):
        if np.linalg.norm(g_target.edges[j] - g_source.edges[jp]) <= delta_e:
            return UNCHANGED
    return "changed"


def _without_lookalikes(o: ObjectInstance, neighborhood: Sequence[ObjectInstance], delta_s: float) -> list:
    """Drop neighbors whose shape matches ``o`` itself.

    A second instance of the same object (two observations that landed just
    beyond the association distance) moves together with it, so an edge to it
    would vouch for a moved object.
    """
    return [v for v in neighborhood if v.id == o.id or float(v.unit_code @ o.unit_code) <= delta_s]


@dataclass(frozen=True)
class DetectorConfig:
    delta_s: float = 0.9
    delta_d: float = 0.02
    delta_e: float = 0.03
    l: float = 1.2
    n_correspondences: int = 6
    ransac: RansacConfig = field(default_factory=RansacConfig)
    neighbor_margin: float = 0.0
    # Cap on buffered correspondences drawn from one source neighborhood; None = no cap.
    max_pairs_per_neighborhood: Optional[int] = None

    def __post_init__(self):
        if self.max_pairs_per_neighborhood is not None and self.max_pairs_per_neighborhood < 1:
            raise InvalidInputError("max_pairs_per_neighborhood must be positive")
        if not (0.0 < self.delta_s < 1.0):
            raise InvalidInputError("delta_s must lie in (0, 1)")
        if self.delta_d <= 0 or self.delta_e <= 0 or self.l <= 0:
            raise InvalidInputError("delta_d, delta_e and l must be positive")
        if self.n_correspondences < self.ransac.min_sample:
            raise InvalidInputError("need at least min_sample correspondences")


class ChangeDetector:
    """Detector state: frozen source map, growing target map and registration.

    Feed target measurements through :meth:`process_measurement` (or a whole
    frame through :meth:`process_frame`), then call :meth:`finalize_removed`
    once the target stream ends.
    """

    def __init__(self, source_tree: SpatialObjectTree, config: DetectorConfig = DetectorConfig(),
                 t_rel: Optional[RigidTransform] = None):
        self.config = config
        self.source_tree = source_tree
        self.target_tree = SpatialObjectTree(config.l, config.neighbor_margin)
        self.t_rel = t_rel
        self.correspondences = CorrespondenceSet(capacity=config.n_correspondences)
        self.pending: list[int] = []
        self.inlier_mask: Optional[np.ndarray] = None
        self.registration_attempts = 0
        self.last_verdict: dict[int, ChangeVerdict] = {}
        self._source_list = source_tree.all_objects()

    @property
    def registered(self) -> bool:
        return self.t_rel is not None

    def process_measurement(self, m: Measurement) -> list[ChangeVerdict]:
        return self.process_frame([m])

    def process_frame(self, measurements: Iterable[Measurement]) -> list[ChangeVerdict]:
        """Insert every measurement of a frame, then classify the touched objects.

        Inserting the frame first means an object seen together with its
        neighbors is never compared against a half-built target neighborhood.
        """
        touched: dict[int, int] = {}
        for m in measurements:
            if m.session != "target":
                raise InvalidInputError("the detector consumes target-session measurements")
            outcome = self.target_tree.insert_or_associate(m, self.config.delta_d, self.config.delta_s)
            touched.setdefault(outcome.object_id, m.frame_index)
        verdicts: list[ChangeVerdict] = []
        if not self.registered:
            for oid in touched:
                if oid not in self.pending:
                    self.pending.append(oid)
                self._collect_correspondence(self.target_tree[oid])
            if not self._try_register():
                return verdicts
            frame = max(touched.values()) if touched else -1
            drained, self.pending = self.pending, []
            for oid in drained:
                verdicts.extend(self._classify_and_record(self.target_tree[oid], frame))
            return verdicts
        for oid, frame in touched.items():
            verdicts.extend(self._classify_and_record(self.target_tree[oid], frame))
        return verdicts

    def _collect_correspondence(self, o: ObjectInstance) -> None:
        if self.correspondences.has_target(o.id):
            return
        src = best_shape_match(o, self._source_list, self.config.delta_s)
        if src is None:
            return
        cap = self.config.max_pairs_per_neighborhood
        if cap is not None:
            # Pairs from a single table are nearly coplanar and leave the tilt unobservable.
            local = {s.id for s in self.source_tree.query_neighborhood(src.center)}
            if sum(c.source_id in local for c in self.correspondences.pairs) >= cap:
                return
        src.matched = True
        sim = float(src.unit_code @ o.unit_code)
        self.correspondences.add(Correspondence(src.center, o.center, sim, src.id, o.id))

    def _try_register(self) -> bool:
        if not self.correspondences.full:
            return False
        # Use current object states: target centers may have improved since collection.
        refreshed = CorrespondenceSet(capacity=self.correspondences.capacity)
        for c in self.correspondences.pairs:
            refreshed.add(Correspondence(self.source_tree[c.source_id].center,
                                         self.target_tree[c.target_id].center,
                                         c.similarity, c.source_id, c.target_id))
        self.registration_attempts += 1
        try:
            self.t_rel, self.inlier_mask = ransac_register(refreshed, self.config.ransac)
        except RegistrationFailedError:
            return False
        return True

    def _classify_and_record(self, o: ObjectInstance, frame: int) -> list[ChangeVerdict]:
        if o.marked_changed:
            return []
        verdict = self.classify_object(o, frame)
        previous = self.last_verdict.get(o.id)
        self.last_verdict[o.id] = verdict
        if verdict.changed:
            o.marked_changed = True
        if previous is None or previous.kind != verdict.kind or previous.evidence != verdict.evidence:
            return [verdict]
        return []

    def classify_object(self, o: ObjectInstance, frame_index: int = -1) -> ChangeVerdict:
        if self.t_rel is None:
            raise RegistrationFailedError("no inter-session transform yet")
        cfg = self.config
        projected = self.t_rel.apply(o.center)
        source_nbhd = self.source_tree.query_neighborhood(projected)
        for s in source_nbhd:
            s.observed = True
        if not source_nbhd:
            return ChangeVerdict(o.id, NEW_LOCATION, "empty_source_neighborhood", frame_index)
        sims = np.stack([s.unit_code for s in source_nbhd]) @ o.unit_code
        order = np.argsort(-sims, kind="stable")
        matches = [(source_nbhd[i], float(sims[i])) for i in order if sims[i] > cfg.delta_s]
        if not matches:
            return ChangeVerdict(o.id, NEW_SHAPE, "no_shape_match", frame_index)
        for s, _ in matches:
            s.matched = True

        target_nbhd = _without_lookalikes(o, self.target_tree.query_neighborhood(o.center), cfg.delta_s)
        g_target = build_object_graph(o, target_nbhd, self.t_rel)
        used_fallback = False
        for s, sim in matches:
            source_graph_nbhd = _without_lookalikes(s, source_nbhd, cfg.delta_s)
            if len(target_nbhd) == 1 or len(source_graph_nbhd) == 1:
                used_fallback = True
                if np.linalg.norm(s.center - projected) < cfg.delta_d and sim > cfg.delta_s:
                    return ChangeVerdict(o.id, UNCHANGED, "singleton_fallback", frame_index)
                continue
            g_source = build_object_graph(s, source_graph_nbhd)
            if compare_graphs(g_target, g_source, cfg.delta_s, cfg.delta_e) == UNCHANGED:
                return ChangeVerdict(o.id, UNCHANGED, "consistent_layout", frame_index)
        evidence = "singleton_fallback" if used_fallback else "all_edges_differ"
        return ChangeVerdict(o.id, MOVED, evidence, frame_index)

    def finalize_removed(self) -> list[ChangeVerdict]:
        """Source objects that took part in a neighborhood query but never matched."""
        return [
            ChangeVerdict(s.id, REMOVED, "never_matched", -1, session="source")
            for s in self.source_tree.all_objects()
            if s.observed and not s.matched
        ]

    def final_verdicts(self) -> dict[int, ChangeVerdict]:
        return dict(sorted(self.last_verdict.items()))


def build_source_tree(measurements: Iterable[Measurement], config: DetectorConfig = DetectorConfig()
                      ) -> SpatialObjectTree:
    tree = SpatialObjectTree(config.l, config.neighbor_margin)
    for m in measurements:
        tree.insert_or_associate(m, config.delta_d, config.delta_s)
    return tree
