"""Seeded synthetic scenarios: tables with objects, injected changes, camera
trajectories and the per-frame measurement / partial-cloud streams they yield.

Geometry is coarse on purpose. Objects are primitives resting on tables,
visibility is a frustum test, and occlusion is the angular overlap of closer
objects as seen from the camera.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import (
    CapacityError,
    InvalidInputError,
    Measurement,
    NoiseModel,
    PlacementError,
    PointCloud,
    RigidTransform,
    compose,
)
from .descriptor import Primitive, SyntheticShapeLibrary, ViewContext, generate_shape_library, synth_observe

LABELS = ("unchanged", "added", "removed", "moved")
CHANGE_KINDS = ("add", "remove", "move", "swap")
SESSION_INDEX = {"source": 0, "target": 1}
MAX_PLACEMENT_ATTEMPTS = 10_000


@dataclass(frozen=True)
class Table:
    index: int
    center: tuple          # (x, y) meters
    height: float
    view_azimuth: float    # direction (rad) from the table toward the usual camera side


@dataclass(frozen=True)
class SceneObject:
    gt_id: int
    shape_id: int
    table: int
    center: tuple          # (x, y, z) meters, world frame

    @property
    def position(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float)


@dataclass
class Scene:
    tables: list
    objects: list
    library: SyntheticShapeLibrary
    table_radius: float = 0.22
    min_spacing: float = 0.08

    def by_id(self, gt_id: int) -> SceneObject:
        for o in self.objects:
            if o.gt_id == gt_id:
                return o
        raise KeyError(gt_id)

    def on_table(self, table: int) -> list:
        return [o for o in self.objects if o.table == table]

    def to_dict(self) -> dict:
        return {
            "tables": [
                {"index": t.index, "center": list(t.center), "height": t.height,
                 "view_azimuth": t.view_azimuth} for t in self.tables
            ],
            "objects": [
                {"gt_id": o.gt_id, "shape_id": o.shape_id, "table": o.table, "center": list(o.center)}
                for o in self.objects
            ],
        }


@dataclass(frozen=True)
class SceneConfig:
    n_tables: int = 8
    objects_per_table: tuple = (3, 5)
    table_positions: Optional[tuple] = None
    table_height: float = 0.75
    table_radius: float = 0.22
    min_spacing: float = 0.08
    n_shapes: int = 20
    k: int = 256
    max_pairwise_similarity: float = 0.8
    active_fraction: float = 0.25
    primitive_family: str = "mixed"
    unique_shapes: bool = False
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.objects_per_table
        if self.n_tables < 1 or lo < 1 or hi < lo:
            raise InvalidInputError("invalid table/object counts")
        if self.table_positions is not None and len(self.table_positions) != self.n_tables:
            raise InvalidInputError("table_positions must list one (x, y) per table")


def default_table_layout(n_tables: int) -> list:
    """Tables on distinct 1.6 m columns and rows, zig-zagging off the diagonal.

    No two tables share an x- or y-extent, so one table's interval node never
    cuts through another table's objects, even after a few degrees of yaw
    between the session frames. Rows 1 and 2 of every block of four are
    swapped so that consecutive tables are not collinear.
    """
    rows = [i + (1 if i % 4 == 1 else -1 if i % 4 == 2 else 0) for i in range(n_tables)]
    if n_tables % 4 == 2:  # a lone trailing swap would point past the last row
        rows[-1] = n_tables - 1
    return [(i * 1.6, r * 1.6) for i, r in enumerate(rows)]


def _place(rng, table: Table, radius: float, spacing: float, occupied: Sequence[np.ndarray],
           height: float, avoid: Optional[np.ndarray] = None, min_shift: float = 0.0) -> np.ndarray:
    cx, cy = table.center
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        xy = np.array([cx, cy]) + rng.uniform(-radius, radius, size=2)
        p = np.array([xy[0], xy[1], table.height + height / 2.0])
        if any(np.linalg.norm(p[:2] - q[:2]) < spacing for q in occupied):
            continue
        if avoid is not None and np.linalg.norm(p[:2] - avoid[:2]) < min_shift:
            continue
        return p
    raise PlacementError(f"no free spot on table {table.index}")


def generate_scene(cfg: SceneConfig, library: Optional[SyntheticShapeLibrary] = None) -> Scene:
    rng = np.random.default_rng([cfg.seed, 100])
    if library is None:
        library = generate_shape_library(cfg.n_shapes, cfg.k, cfg.max_pairwise_similarity,
                                         seed=cfg.seed, active_fraction=cfg.active_fraction,
                                         family=cfg.primitive_family)
    positions = cfg.table_positions or default_table_layout(cfg.n_tables)
    tables = [
        Table(i, (float(x), float(y)), cfg.table_height, float(rng.uniform(-np.pi, np.pi)))
        for i, (x, y) in enumerate(positions)
    ]
    objects: list[SceneObject] = []
    unused = list(library.shape_ids)
    for t in tables:
        n = int(rng.integers(cfg.objects_per_table[0], cfg.objects_per_table[1] + 1))
        if cfg.unique_shapes:
            if len(unused) < n:
                raise CapacityError("library too small for unique shapes")
            picks = rng.choice(len(unused), size=n, replace=False)
            shapes = [unused[i] for i in picks]
            unused = [s for s in unused if s not in shapes]
        else:
            if len(library) < n:
                raise CapacityError("library smaller than objects per table")
            shapes = [library.shape_ids[i] for i in rng.choice(len(library), size=n, replace=False)]
        occupied: list[np.ndarray] = []
        for sid in shapes:
            try:
                p = _place(rng, t, cfg.table_radius, cfg.min_spacing, occupied,
                           library.primitives[sid].height)
            except PlacementError as exc:
                raise CapacityError(str(exc)) from exc
            occupied.append(p)
            objects.append(SceneObject(len(objects), int(sid), t.index, tuple(p.tolist())))
    return Scene(tables, objects, library, cfg.table_radius, cfg.min_spacing)


def apply_changes(scene: Scene, spec: Sequence[dict], seed: int = 0, min_move: float = 0.1,
                  min_unchanged_per_table: int = 2) -> tuple:
    """Apply add/remove/move/swap entries; return the changed scene and gt labels.

    Entries look like ``{"kind": "move", "table": 3, "to_table": 5}``; objects
    are chosen by a seeded generator among those not yet touched. Every table
    keeps at least ``min_unchanged_per_table`` untouched objects, and added or
    relocated objects never share a shape with anything on their destination
    table in either session.
    """
    rng = np.random.default_rng([seed, 200])
    objects = {o.gt_id: o for o in scene.objects}
    source_shapes = {t.index: {o.shape_id for o in scene.on_table(t.index)} for t in scene.tables}
    labels = {gid: "unchanged" for gid in objects}
    next_id = max(objects, default=-1) + 1
    n_tables = len(scene.tables)
    lib = scene.library

    def untouched(table):
        return [o for o in objects.values() if o.table == table and labels[o.gt_id] == "unchanged"]

    def occupied(table, exclude=()):
        return [o.position for o in objects.values() if o.table == table and o.gt_id not in exclude]

    def dest_shapes(table):
        return source_shapes[table] | {o.shape_id for o in objects.values() if o.table == table}

    def pick(table, count):
        pool = untouched(table)
        if len(pool) - count < min_unchanged_per_table:
            raise PlacementError(f"table {table} has too few untouched objects for this change")
        idx = rng.choice(len(pool), size=count, replace=False)
        return [pool[i] for i in sorted(idx)]

    for entry in spec:
        kind = entry.get("kind")
        if kind not in CHANGE_KINDS:
            raise InvalidInputError(f"unknown change kind {kind!r}")
        table = int(entry.get("table", -1))
        if not (0 <= table < n_tables):
            raise InvalidInputError(f"change refers to missing table {table}")
        t = scene.tables[table]
        if kind == "add":
            used = {o.shape_id for o in objects.values()}
            options = [s for s in lib.shape_ids if s not in dest_shapes(table)]
            fresh = [s for s in options if s not in used]
            options = fresh or options
            if not options:
                raise PlacementError(f"no shape left to add on table {table}")
            sid = options[int(rng.integers(len(options)))]
            p = _place(rng, t, scene.table_radius, scene.min_spacing, occupied(table),
                       lib.primitives[sid].height)
            objects[next_id] = SceneObject(next_id, sid, table, tuple(p.tolist()))
            labels[next_id] = "added"
            next_id += 1
        elif kind == "remove":
            (victim,) = pick(table, 1)
            del objects[victim.gt_id]
            labels[victim.gt_id] = "removed"
        elif kind == "move":
            dest = int(entry.get("to_table", table))
            if not (0 <= dest < n_tables):
                raise InvalidInputError(f"move refers to missing table {dest}")
            if dest == table:
                (obj,) = pick(table, 1)
            else:
                pool = [o for o in untouched(table) if o.shape_id not in dest_shapes(dest)]
                if len(untouched(table)) - 1 < min_unchanged_per_table or not pool:
                    raise PlacementError(f"cannot move an object from table {table} to {dest}")
                obj = pool[int(rng.integers(len(pool)))]
            p = _place(rng, scene.tables[dest], scene.table_radius, scene.min_spacing,
                       occupied(dest, exclude=(obj.gt_id,)), lib.primitives[obj.shape_id].height,
                       avoid=obj.position, min_shift=min_move)
            objects[obj.gt_id] = replace(obj, table=dest, center=tuple(p.tolist()))
            labels[obj.gt_id] = "moved"
        else:  # swap
            pool = untouched(table)
            if len(pool) - 2 < min_unchanged_per_table:
                raise PlacementError(f"table {table} has too few untouched objects for a swap")
            pairs = [(a, b) for i, a in enumerate(pool) for b in pool[i + 1:]
                     if np.linalg.norm(a.position[:2] - b.position[:2]) >= min_move]
            if not pairs:
                raise PlacementError("swap partners are too close to register as moved")
            a, b = pairs[int(rng.integers(len(pairs)))]
            # Same table, so each object keeps its own resting height.
            objects[a.gt_id] = replace(a, center=(b.center[0], b.center[1], a.center[2]))
            objects[b.gt_id] = replace(b, center=(a.center[0], a.center[1], b.center[2]))
            labels[a.gt_id] = labels[b.gt_id] = "moved"
    changed = Scene(scene.tables, sorted(objects.values(), key=lambda o: o.gt_id), lib,
                    scene.table_radius, scene.min_spacing)
    return changed, dict(sorted(labels.items()))


@dataclass
class Trajectory:
    session: str
    poses: list                  # camera-to-world RigidTransforms
    tables: list                 # table index each pose faces
    overlap_profile: dict = field(default_factory=dict)  # table -> same_side | opposite_side

    def __len__(self):
        return len(self.poses)


def look_at(camera: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Camera-to-world pose with z forward, x right, y down."""
    fwd = target - camera
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return RigidTransform(np.column_stack([right, down, fwd]), camera)


def make_trajectory(scene: Scene, session: str, low_overlap_tables: Sequence[int] = (),
                    frames_per_table: int = 10, arc_deg: float = 100.0,
                    radius: tuple = (0.8, 1.1), height: tuple = (0.35, 0.55),
                    seed: int = 0) -> Trajectory:
    """Visit tables in order, sweeping an arc on one side of each table.

    Both sessions sweep the arc around each table's ``view_azimuth``; for
    ``low_overlap_tables`` the target session sweeps the opposite side.
    """
    if session not in SESSION_INDEX:
        raise InvalidInputError(f"unknown session {session!r}")
    rng = np.random.default_rng([seed, 300, SESSION_INDEX[session]])
    profile = {t.index: ("opposite_side" if t.index in set(low_overlap_tables) else "same_side")
               for t in scene.tables}
    poses, tables = [], []
    arc = np.deg2rad(arc_deg)
    for t in scene.tables:
        base = t.view_azimuth
        if session == "target" and profile[t.index] == "opposite_side":
            base += np.pi
        center = np.array([t.center[0], t.center[1], t.height + 0.05])
        offsets = np.linspace(-arc / 2, arc / 2, frames_per_table) if frames_per_table > 1 else [0.0]
        for off in offsets:
            az = base + off + rng.uniform(-0.05, 0.05)
            r = rng.uniform(*radius)
            cam = np.array([t.center[0] + r * np.cos(az), t.center[1] + r * np.sin(az),
                            t.height + rng.uniform(*height)])
            poses.append(look_at(cam, center))
            tables.append(t.index)
    return Trajectory(session, poses, tables, profile)


@dataclass(frozen=True)
class VisibleObject:
    gt_id: int
    occlusion: float
    distance: float


@dataclass(frozen=True)
class FrameView:
    frame_index: int
    camera: RigidTransform
    table: int
    visible: tuple


def _box_union_coverage(box: tuple, others: list) -> float:
    """Fraction of the rectangle ``box`` covered by the union of ``others``.

    Rectangles are (x_lo, x_hi, y_lo, y_hi); the union is measured exactly on
    the grid spanned by all clipped edges.
    """
    x0, x1, y0, y1 = box
    area = (x1 - x0) * (y1 - y0)
    clipped = [(max(a, x0), min(b, x1), max(c, y0), min(d, y1))
               for a, b, c, d in others if b > x0 and a < x1 and d > y0 and c < y1]
    if not clipped or area <= 0:
        return 0.0
    xs = np.unique([x0, x1] + [v for r in clipped for v in r[:2]])
    ys = np.unique([y0, y1] + [v for r in clipped for v in r[2:]])
    xm = (xs[:-1] + xs[1:]) / 2.0
    ym = (ys[:-1] + ys[1:]) / 2.0
    covered = np.zeros((len(xm), len(ym)), dtype=bool)
    for a, b, c, d in clipped:
        covered |= ((xm > a) & (xm < b))[:, None] & ((ym > c) & (ym < d))[None, :]
    cell = np.outer(np.diff(xs), np.diff(ys))
    return float(cell[covered].sum() / area)


def plan_frames(scene: Scene, traj: Trajectory, hfov_deg: float = 70.0, max_range: float = 1.8,
                max_occlusion: float = 0.5, far_side_penalty: float = 0.1) -> list:
    """Per frame, the objects in view with their occlusion fractions.

    Each object covers an azimuth x elevation box as seen from the camera; its
    occlusion is the share of that box hidden behind nearer objects. Objects
    more occluded than ``max_occlusion`` are dropped (segmentation would miss
    them). On opposite-side tables the target session also loses the far
    side of every object, which adds ``far_side_penalty``.
    """
    half_fov = np.deg2rad(hfov_deg) / 2.0
    centers = np.array([o.center for o in scene.objects], dtype=float).reshape(-1, 3)
    prims = [scene.library.primitives[o.shape_id] for o in scene.objects]
    radii = np.array([p.footprint_radius for p in prims])
    half_h = np.array([p.height / 2.0 for p in prims])
    lift = np.column_stack([np.zeros((len(prims), 2)), half_h]) if prims else np.zeros((0, 3))
    frames = []
    for f, (pose, table) in enumerate(zip(traj.poses, traj.tables)):
        if len(centers) == 0:
            frames.append(FrameView(f, pose, table, ()))
            continue
        to_cam = pose.inverse()
        cam = to_cam.apply(centers)
        top, bottom = to_cam.apply(centers + lift), to_cam.apply(centers - lift)
        depth = cam[:, 2]
        dist = np.linalg.norm(cam, axis=1)
        az = np.arctan2(cam[:, 0], depth)
        in_view = (depth > 0) & (np.abs(az) < half_fov) & (dist < max_range)
        flat = np.maximum(np.hypot(cam[:, 0], depth), 1e-9)
        half_w = np.arctan2(radii, flat)
        el_top = np.arctan2(-top[:, 1], np.hypot(top[:, 0], top[:, 2]))
        el_bot = np.arctan2(-bottom[:, 1], np.hypot(bottom[:, 0], bottom[:, 2]))
        order = [i for i in np.argsort(dist, kind="stable") if in_view[i]]
        penalty = far_side_penalty if (
            traj.session == "target" and traj.overlap_profile.get(table) == "opposite_side") else 0.0
        visible = []
        closer: list[tuple] = []
        for i in order:
            box = (az[i] - half_w[i], az[i] + half_w[i], min(el_bot[i], el_top[i]), max(el_bot[i], el_top[i]))
            occ = min(_box_union_coverage(box, closer) + penalty, 0.99)
            closer.append(box)
            if occ <= max_occlusion:
                visible.append(VisibleObject(scene.objects[i].gt_id, float(occ), float(dist[i])))
        visible.sort(key=lambda v: v.gt_id)
        frames.append(FrameView(f, pose, table, tuple(visible)))
    return frames


def random_offset(translation: float, rotation_deg: float, seed) -> RigidTransform:
    """6-DoF offset with the given translation norm and rotation angle, random axes."""
    rng = np.random.default_rng(seed)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    return RigidTransform.from_rotvec(axis * np.deg2rad(rotation_deg), direction * translation)


def drift_sequence(n_frames: int, noise: NoiseModel, seed) -> list:
    """Accumulated per-frame pose jitter, one transform per frame."""
    rng = np.random.default_rng(seed)
    out = []
    cur = RigidTransform()
    for _ in range(n_frames):
        if noise.sigma_rot > 0 or noise.sigma_trans > 0:
            step = RigidTransform.from_rotvec(noise.sigma_rot * rng.standard_normal(3),
                                              noise.sigma_trans * rng.standard_normal(3))
            cur = compose(step, cur)
        out.append(cur)
    return out


def stream_observations(scene: Scene, traj: Trajectory, noise: NoiseModel, session: str, seed: int,
                        offset: Optional[RigidTransform] = None, frames: Optional[list] = None,
                        **plan_kwargs) -> list:
    """Frame-ordered measurements for one session, expressed in that session's frame.

    The session frame is ``offset`` composed with the accumulated drift of the
    frame; the source session normally has no offset.
    """
    if session != traj.session:
        raise InvalidInputError("trajectory belongs to a different session")
    if frames is None:
        frames = plan_frames(scene, traj, **plan_kwargs)
    offset = offset or RigidTransform()
    drift = drift_sequence(len(frames), noise, [seed, 400, SESSION_INDEX[session]])
    out: list[Measurement] = []
    for fv in frames:
        frame_tf = compose(offset, drift[fv.frame_index])
        for v in fv.visible:
            obj = scene.by_id(v.gt_id)
            view = ViewContext(fv.camera, v.occlusion, v.distance)
            m = synth_observe(scene.library, obj.shape_id, obj.position, view, noise,
                              seed=[seed, SESSION_INDEX[session], fv.frame_index, v.gt_id],
                              frame_index=fv.frame_index, session=session, label=v.gt_id)
            out.append(replace(m, center=frame_tf.apply(m.center)))
    return out


def _surface_samples(prim: Primitive, n: int, rng: np.random.Generator) -> tuple:
    """Points and outward normals on a primitive centered at the origin, z up."""
    dx, dy, dz = prim.dims
    if prim.kind == "box":
        hx, hy, hz = dx / 2, dy / 2, dz / 2
        areas = np.array([dy * dz, dy * dz, dx * dz, dx * dz, dx * dy, dx * dy])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        u = rng.uniform(-1, 1, size=(n, 2))
        pts = np.zeros((n, 3))
        nrm = np.zeros((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        half = np.array([hx, hy, hz])
        for ax in range(3):
            sel = axis == ax
            other = [a for a in range(3) if a != ax]
            pts[sel, ax] = sign[sel] * half[ax]
            pts[sel, other[0]] = u[sel, 0] * half[other[0]]
            pts[sel, other[1]] = u[sel, 1] * half[other[1]]
            nrm[sel, ax] = sign[sel]
        return pts, nrm
    if prim.kind == "cylinder":
        r, h = dx / 2, dz
        lateral = 2 * np.pi * r * h
        cap = np.pi * r * r
        part = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
        theta = rng.uniform(-np.pi, np.pi, size=n)
        rad = r * np.sqrt(rng.uniform(0, 1, size=n))
        z = rng.uniform(-h / 2, h / 2, size=n)
        on_side = part == 0
        pts = np.column_stack([
            np.where(on_side, r, rad) * np.cos(theta),
            np.where(on_side, r, rad) * np.sin(theta),
            np.where(on_side, z, np.where(part == 1, h / 2, -h / 2)),
        ])
        nrm = np.column_stack([
            np.where(on_side, np.cos(theta), 0.0),
            np.where(on_side, np.sin(theta), 0.0),
            np.where(on_side, 0.0, np.where(part == 1, 1.0, -1.0)),
        ])
        return pts, nrm
    # superellipsoid with equal exponents, sampled uniformly in parameter space
    e = prim.exponent
    a = np.array([dx / 2, dy / 2, dz / 2])
    eta = rng.uniform(-np.pi / 2, np.pi / 2, size=n)
    omega = rng.uniform(-np.pi, np.pi, size=n)

    def spow(v, p):
        return np.sign(v) * np.abs(v) ** p

    ce, se, cw, sw = np.cos(eta), np.sin(eta), np.cos(omega), np.sin(omega)
    pts = np.column_stack([a[0] * spow(ce, e) * spow(cw, e), a[1] * spow(ce, e) * spow(sw, e),
                           a[2] * spow(se, e)])
    nrm = np.column_stack([spow(ce, 2 - e) * spow(cw, 2 - e) / a[0],
                           spow(ce, 2 - e) * spow(sw, 2 - e) / a[1], spow(se, 2 - e) / a[2]])
    norm = np.linalg.norm(nrm, axis=1, keepdims=True)
    nrm = np.divide(nrm, norm, out=np.zeros_like(nrm), where=norm > 0)
    return pts, nrm


def sample_partial_cloud(primitive: Primitive, pose: RigidTransform, camera_pose: RigidTransform,
                         n_points: int, seed=0, sigma_point: float = 0.0,
                         return_normals: bool = False):
    """Surface samples whose outward normals face the camera, in the world frame."""
    if n_points < 1:
        raise InvalidInputError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    cam_local = pose.inverse().apply(camera_pose.translation)
    kept_p: list[np.ndarray] = []
    kept_n: list[np.ndarray] = []
    total = 0
    for _ in range(50):
        pts, nrm = _surface_samples(primitive, max(4 * n_points, 64), rng)
        facing = np.einsum("ij,ij->i", nrm, cam_local - pts) > 0
        kept_p.append(pts[facing])
        kept_n.append(nrm[facing])
        total += int(facing.sum())
        if total >= n_points:
            break
    pts = np.concatenate(kept_p)[:n_points]
    nrm = np.concatenate(kept_n)[:n_points]
    world = pose.apply(pts)
    if sigma_point > 0:
        world = world + sigma_point * rng.standard_normal(world.shape)
    cloud = PointCloud(world.reshape(-1, 3), frame="world")
    if return_normals:
        return cloud, nrm @ pose.rotation.T
    return cloud


def object_pose(scene: Scene, gt_id: int) -> RigidTransform:
    return RigidTransform(np.eye(3), scene.by_id(gt_id).position)


def session_clouds(scene: Scene, frames: list, n_points: int, seed, sigma_point: float = 0.0):
    """Yield (frame_index, gt_id, cloud) for every visible object, in true world coordinates."""
    for fv in frames:
        for v in fv.visible:
            obj = scene.by_id(v.gt_id)
            cloud = sample_partial_cloud(scene.library.primitives[obj.shape_id],
                                         object_pose(scene, v.gt_id), fv.camera, n_points,
                                         seed=[*np.atleast_1d(seed).tolist(), fv.frame_index, v.gt_id],
                                         sigma_point=sigma_point)
            yield fv.frame_index, v.gt_id, cloud
