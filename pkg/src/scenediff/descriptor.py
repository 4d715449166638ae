"""Shape codes, occupancy-based shape completion and a synthetic descriptor provider.

The synthetic provider stands in for a trained neural field: each library
shape owns a canonical non-negative code, and observations perturb that code
with occlusion-dependent noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (
    DEFAULT_K,
    CapacityError,
    EmptyReconstructionError,
    InvalidInputError,
    Measurement,
    NoiseModel,
    PointCloud,
    RigidTransform,
    as_point,
    as_points,
    as_shape_code,
)

# Vectorised occupancy field: (n, 3) query points -> (n,) values in [0, 1].
OccupancyField = Callable[[np.ndarray], np.ndarray]

PRIMITIVE_KINDS = ("box", "cylinder", "superellipsoid")
MAX_LIBRARY_ATTEMPTS = 1_000_000


def shape_code_from_latent(z) -> np.ndarray:
    """Per-row Euclidean norms of a (k, 3) latent matrix."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 2 or z.shape[1] != 3 or z.shape[0] == 0:
        raise InvalidInputError(f"latent must have shape (k, 3), got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("latent has non-finite entries")
    return np.sqrt(np.einsum("ij,ij->i", z, z))


def cosine_similarity(a, b) -> float:
    a = as_shape_code(a)
    b = as_shape_code(b)
    if a.shape != b.shape:
        raise InvalidInputError("shape codes differ in length")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise InvalidInputError("cosine similarity of a zero-norm code")
    return float(np.dot(a, b) / (na * nb))


def query_grid(partial, box_scale: float = 1.5, samples_per_axis: int = 24) -> np.ndarray:
    """Regular grid over the bounding box of ``partial`` scaled about its center."""
    pts = as_points(partial)
    if len(pts) == 0:
        raise InvalidInputError("partial cloud is empty")
    if samples_per_axis < 2:
        raise InvalidInputError("samples_per_axis must be >= 2")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = (lo + hi) / 2.0
    half = (hi - lo) / 2.0 * box_scale
    axes = [np.linspace(c - h, c + h, samples_per_axis) for c, h in zip(center, half)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])


def reconstruct_full_cloud(
    field: OccupancyField,
    partial,
    box_scale: float = 1.5,
    samples_per_axis: int = 24,
    v0: float = 0.5,
) -> PointCloud:
    """Keep the grid points whose predicted occupancy exceeds ``v0``."""
    if not (0.0 < v0 < 1.0):
        raise InvalidInputError("v0 must lie in (0, 1)")
    grid = query_grid(partial, box_scale, samples_per_axis)
    values = np.asarray(field(grid), dtype=float).reshape(-1)
    if values.shape[0] != grid.shape[0]:
        raise InvalidInputError("occupancy field returned the wrong number of values")
    kept = grid[values > v0]
    if len(kept) == 0:
        raise EmptyReconstructionError("no query point exceeded the occupancy threshold")
    return PointCloud(kept, frame=getattr(partial, "frame", "camera"))


def mean_occupancy(field: OccupancyField, cloud) -> float:
    """Average predicted occupancy over a reconstructed cloud (the quality score)."""
    pts = as_points(cloud)
    if len(pts) == 0:
        raise InvalidInputError("cloud is empty")
    return float(np.mean(field(pts)))


def recover_center(cloud) -> np.ndarray:
    pts = as_points(cloud)
    if len(pts) == 0:
        raise InvalidInputError("cannot recover the center of an empty cloud")
    return pts.mean(axis=0)


@dataclass(frozen=True)
class Primitive:
    """Coarse object geometry: full extents (dx, dy, dz) in meters."""

    kind: str
    dims: tuple
    exponent: float = 1.0

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise InvalidInputError(f"unknown primitive kind {self.kind!r}")
        dims = tuple(float(v) for v in self.dims)
        if len(dims) != 3 or min(dims) <= 0:
            raise InvalidInputError("primitive dims must be three positive extents")
        object.__setattr__(self, "dims", dims)

    @property
    def footprint_radius(self) -> float:
        if self.kind == "box":
            return float(np.hypot(self.dims[0], self.dims[1]) / 2.0)
        return max(self.dims[0], self.dims[1]) / 2.0

    @property
    def height(self) -> float:
        return self.dims[2]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dims": list(self.dims), "exponent": self.exponent}

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        return cls(d["kind"], tuple(d["dims"]), d.get("exponent", 1.0))


@dataclass
class SyntheticShapeLibrary:
    codes: dict = field(default_factory=dict)        # shape_id -> unit-norm code
    primitives: dict = field(default_factory=dict)   # shape_id -> Primitive
    max_pairwise_similarity: float = 0.8

    @property
    def shape_ids(self) -> list:
        return sorted(self.codes)

    @property
    def k(self) -> int:
        return len(next(iter(self.codes.values())))

    def __len__(self) -> int:
        return len(self.codes)

    def __contains__(self, shape_id) -> bool:
        return shape_id in self.codes

    def to_json(self) -> str:
        doc = {
            "max_pairwise_similarity": self.max_pairwise_similarity,
            "shapes": [
                {"shape_id": sid, "code": self.codes[sid].tolist(),
                 "primitive": self.primitives[sid].to_dict()}
                for sid in self.shape_ids
            ],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticShapeLibrary":
        doc = json.loads(text)
        lib = cls(max_pairwise_similarity=float(doc["max_pairwise_similarity"]))
        for entry in doc["shapes"]:
            sid = int(entry["shape_id"])
            lib.codes[sid] = np.asarray(entry["code"], dtype=float)
            lib.primitives[sid] = Primitive.from_dict(entry["primitive"])
        return lib


def _sample_primitive(rng: np.random.Generator, family: str, index: int) -> Primitive:
    if family == "mug":
        # Near-identical bodies: coarse geometry alone cannot tell these apart.
        r = rng.uniform(0.0398, 0.0402)
        h = rng.uniform(0.099, 0.101)
        return Primitive("cylinder", (2 * r, 2 * r, h))
    if family != "mixed":
        raise InvalidInputError(f"unknown primitive family {family!r}")
    kind = PRIMITIVE_KINDS[index % len(PRIMITIVE_KINDS)]
    dx, dy = rng.uniform(0.05, 0.09, size=2)
    dz = rng.uniform(0.06, 0.14)
    if kind == "cylinder":
        dy = dx
    exponent = rng.uniform(0.4, 1.0) if kind == "superellipsoid" else 1.0
    return Primitive(kind, (dx, dy, dz), exponent)


def generate_shape_library(
    n_shapes: int,
    k: int = DEFAULT_K,
    max_pairwise_similarity: float = 0.8,
    seed: int = 0,
    active_fraction: float = 0.25,
    family: str = "mixed",
) -> SyntheticShapeLibrary:
    """Rejection-sample unit-norm non-negative canonical codes.

    Each candidate activates a random subset of dimensions (``active_fraction``)
    with half-normal magnitudes; candidates too similar to an accepted code are
    discarded.
    """
    if n_shapes < 1 or k < 1:
        raise InvalidInputError("n_shapes and k must be positive")
    if not (0.0 < max_pairwise_similarity < 1.0):
        raise InvalidInputError("max_pairwise_similarity must lie in (0, 1)")
    if not (0.0 < active_fraction <= 1.0):
        raise InvalidInputError("active_fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    accepted: list[np.ndarray] = []
    attempts = 0
    while len(accepted) < n_shapes:
        attempts += 1
        if attempts > MAX_LIBRARY_ATTEMPTS:
            raise CapacityError(
                f"could not place {n_shapes} codes with similarity <= {max_pairwise_similarity}"
            )
        mask = rng.random(k) < active_fraction
        if not mask.any():
            continue
        cand = np.abs(rng.standard_normal(k)) * mask
        cand /= np.linalg.norm(cand)
        if accepted and float(np.max(np.stack(accepted) @ cand)) > max_pairwise_similarity:
            continue
        accepted.append(cand)
    lib = SyntheticShapeLibrary(max_pairwise_similarity=max_pairwise_similarity)
    prim_rng = np.random.default_rng([seed, 1])
    for sid, code in enumerate(accepted):
        lib.codes[sid] = code
        lib.primitives[sid] = _sample_primitive(prim_rng, family, sid)
    return lib


@dataclass(frozen=True)
class ViewContext:
    camera_pose: RigidTransform = field(default_factory=RigidTransform)
    occlusion_fraction: float = 0.0
    distance: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.occlusion_fraction < 1.0):
            raise InvalidInputError("occlusion_fraction must lie in [0, 1)")


def synth_observe(
    lib: SyntheticShapeLibrary,
    shape_id: int,
    true_center,
    view: ViewContext,
    noise: NoiseModel,
    seed,
    frame_index: int = 0,
    session: str = "source",
    label=None,
) -> Measurement:
    """Simulated descriptor output for one view of a library shape (world frame)."""
    if shape_id not in lib:
        raise InvalidInputError(f"shape {shape_id} not in library")
    rng = np.random.default_rng(seed)
    canonical = lib.codes[shape_id]
    sigma = noise.sigma_code * np.sqrt(1.0 + noise.beta * view.occlusion_fraction)
    code = np.maximum(0.0, canonical + sigma * rng.standard_normal(canonical.shape))
    norm = np.linalg.norm(code)
    code = canonical.copy() if norm == 0.0 else code / norm
    center = as_point(true_center) + noise.sigma_center * rng.standard_normal(3)
    quality = float(np.clip(noise.q_max - noise.gamma * view.occlusion_fraction, 1e-6, 1.0))
    return Measurement(code, center, quality, frame_index=frame_index, session=session, label=label)


def similarity_matrix(codes: Sequence[np.ndarray]) -> np.ndarray:
    unit = np.stack([c / np.linalg.norm(c) for c in codes])
    return unit @ unit.T
