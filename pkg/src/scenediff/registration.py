"""Inter-session alignment from shape-matched object centers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    DegenerateGeometryError,
    InsufficientDataError,
    InvalidInputError,
    ObjectInstance,
    RegistrationFailedError,
    RigidTransform,
)


def best_shape_match(
    target: ObjectInstance, source_objects: Sequence[ObjectInstance], delta_s: float
) -> Optional[ObjectInstance]:
    """Most shape-similar source object above ``delta_s`` (ties: lowest id)."""
    best = None
    best_sim = delta_s
    for obj in source_objects:
        sim = float(obj.unit_code @ target.unit_code)
        if sim > best_sim or (best is not None and sim == best_sim and obj.id < best.id):
            best, best_sim = obj, sim
    return best


def _as_pairs(pairs) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 3 or arr.shape[1:] != (2, 3):
        raise InvalidInputError(f"pairs must have shape (n, 2, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("pairs contain non-finite coordinates")
    return arr[:, 0], arr[:, 1]


def estimate_rigid_svd(pairs) -> RigidTransform:
    """Least-squares rotation and translation taking target points onto source points.

    ``pairs`` is a sequence of (source_point, target_point).
    """
    src, tgt = _as_pairs(pairs)
    if len(src) < 3:
        raise InsufficientDataError(f"need at least 3 pairs, got {len(src)}")
    src_mean = src.mean(axis=0)
    tgt_mean = tgt.mean(axis=0)
    src_c = src - src_mean
    tgt_c = tgt - tgt_mean
    sv = np.linalg.svd(src_c, compute_uv=False)
    if sv[1] < 1e-9 and sv[2] < 1e-9:
        raise DegenerateGeometryError("source points are collinear or coincident")
    h = tgt_c.T @ src_c
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, src_mean - rot @ tgt_mean)


@dataclass(frozen=True)
class Correspondence:
    source_center: np.ndarray
    target_center: np.ndarray
    similarity: float
    source_id: int = -1
    target_id: int = -1


@dataclass
class CorrespondenceSet:
    pairs: list = field(default_factory=list)
    capacity: int = 6

    def __len__(self):
        return len(self.pairs)

    @property
    def full(self) -> bool:
        return len(self.pairs) >= self.capacity

    def has_target(self, target_id: int) -> bool:
        return any(c.target_id == target_id for c in self.pairs)

    def add(self, c: Correspondence) -> None:
        if c.target_id >= 0 and self.has_target(c.target_id):
            raise InvalidInputError(f"target object {c.target_id} already has a correspondence")
        self.pairs.append(c)

    def as_array(self) -> np.ndarray:
        return np.array([[c.source_center, c.target_center] for c in self.pairs], dtype=float)


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 200
    inlier_threshold: float = 0.01
    min_sample: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.inlier_threshold <= 0 or self.min_sample < 3:
            raise InvalidInputError("invalid RANSAC configuration")


def _residuals(t: RigidTransform, src: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    return np.linalg.norm(t.apply(tgt) - src, axis=1)


def ransac_register(c, cfg: RansacConfig = RansacConfig()) -> tuple[RigidTransform, np.ndarray]:
    """Consensus rigid fit over correspondence pairs, refit on the inliers.

    Iteration ``i`` draws its sample from a generator seeded by ``(seed, i)``,
    so the result does not depend on evaluation order. The first model
    reaching the best inlier count is kept.
    """
    arr = c.as_array() if isinstance(c, CorrespondenceSet) else np.asarray(c, dtype=float)
    src, tgt = _as_pairs(arr)
    n = len(src)
    if n < cfg.min_sample:
        raise InsufficientDataError(f"need at least {cfg.min_sample} pairs, got {n}")
    best_mask = None
    best_count = 0
    for i in range(cfg.iterations):
        rng = np.random.default_rng([cfg.seed, i])
        idx = rng.choice(n, size=cfg.min_sample, replace=False)
        try:
            model = estimate_rigid_svd(arr[idx])
        except DegenerateGeometryError:
            continue
        mask = _residuals(model, src, tgt) < cfg.inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_mask, best_count = mask, count
            if count == n:
                break
    if best_mask is None or best_count < cfg.min_sample:
        raise RegistrationFailedError(
            f"best consensus has {best_count} inliers, need {cfg.min_sample}"
        )
    return estimate_rigid_svd(arr[best_mask]), best_mask
