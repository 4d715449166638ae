"""Shared value types, rigid transforms and error classes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

DEFAULT_K = 256
SESSIONS = ("source", "target")


class SceneDiffError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(SceneDiffError, ValueError):
    pass


class EmptyReconstructionError(SceneDiffError):
    """No query point cleared the occupancy threshold; the observation is unusable."""


class CapacityError(SceneDiffError):
    """A rejection sampler ran out of attempts."""


class InsufficientDataError(SceneDiffError):
    pass


class DegenerateGeometryError(SceneDiffError):
    pass


class RegistrationFailedError(SceneDiffError):
    pass


class PlacementError(SceneDiffError):
    pass


class ConfigError(SceneDiffError, ValueError):
    pass


class InvariantViolation(SceneDiffError):
    """An internal data-structure invariant does not hold."""


def require(condition: bool, message) -> None:
    if not condition:
        raise InvariantViolation(str(message))


def as_point(p) -> np.ndarray:
    arr = np.asarray(p, dtype=float).reshape(-1)
    if arr.shape != (3,):
        raise InvalidInputError(f"expected a 3-vector, got shape {np.shape(p)}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("point has non-finite coordinates")
    return arr


def as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidInputError(f"expected an (n, 3) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("point cloud has non-finite coordinates")
    return arr


def as_shape_code(values) -> np.ndarray:
    arr = np.asarray(values, dtype=float).reshape(-1)
    if arr.size == 0 or not np.all(np.isfinite(arr)):
        raise InvalidInputError("shape code must be a non-empty finite vector")
    return arr


@dataclass(frozen=True)
class PointCloud:
    """An ordered (n, 3) array of points tagged with the frame it lives in."""

    points: np.ndarray
    frame: str = "world"

    def __post_init__(self):
        if self.frame not in ("camera", "world"):
            raise InvalidInputError(f"unknown frame tag {self.frame!r}")
        object.__setattr__(self, "points", as_points(self.points))

    def __len__(self) -> int:
        return len(self.points)

    def __array__(self, dtype=None, copy=None):
        return self.points if dtype is None else self.points.astype(dtype)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion x -> rotation @ x + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float)
        trans = np.array(self.translation, dtype=float).reshape(-1)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise InvalidInputError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise InvalidInputError("transform has non-finite entries")
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise InvalidInputError("rotation is not a proper orthonormal matrix")
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        from scipy.spatial.transform import Rotation

        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_matrix(), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform a single point (3,) or a stack of points (n, 3)."""
        arr = np.asarray(points, dtype=float)
        return arr @ self.rotation.T + self.translation

    def rotation_angle(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(d["rotation"], d["translation"])

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __repr__(self):
        return f"RigidTransform(angle={self.rotation_angle():.6g} rad, t={self.translation.tolist()})"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def apply(t: RigidTransform, p) -> np.ndarray:
    return t.rotation @ as_point(p) + t.translation


@dataclass(frozen=True, eq=False)
class Measurement:
    """One per-frame object observation: shape code, center and reconstruction quality.

    ``label`` is the simulator's ground-truth object id; the detector never reads it.
    """

    shape_code: np.ndarray
    center: np.ndarray
    quality: float
    frame_index: int = 0
    session: str = "target"
    label: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "shape_code", as_shape_code(self.shape_code))
        object.__setattr__(self, "center", as_point(self.center))
        if not (0.0 < self.quality <= 1.0):
            raise InvalidInputError(f"quality must lie in (0, 1], got {self.quality}")
        if self.session not in SESSIONS:
            raise InvalidInputError(f"unknown session {self.session!r}")

    def to_dict(self) -> dict:
        return {
            "frame_index": self.frame_index,
            "session": self.session,
            "label": self.label,
            "center": self.center.tolist(),
            "quality": self.quality,
            "shape_code": self.shape_code.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Measurement":
        return cls(
            shape_code=np.asarray(d["shape_code"], dtype=float),
            center=np.asarray(d["center"], dtype=float),
            quality=float(d["quality"]),
            frame_index=int(d["frame_index"]),
            session=d["session"],
            label=d.get("label"),
        )


class ObjectInstance:
    """Persistent object record kept by a spatial object tree.

    Code and center are replaced wholesale on a quality-improving update; the
    unit-normalised code is cached because similarity queries dominate runtime.
    """

    __slots__ = ("id", "shape_code", "unit_code", "center", "quality",
                 "marked_changed", "observed", "matched", "label")

    def __init__(self, id: int, shape_code, center, quality: float, label: Optional[int] = None):
        self.id = id
        self.marked_changed = False
        self.observed = False
        self.matched = False
        self.label = label
        self.set_state(shape_code, center, quality)

    def set_state(self, shape_code, center, quality: float) -> None:
        code = as_shape_code(shape_code)
        norm = np.linalg.norm(code)
        if norm == 0.0:
            raise InvalidInputError("shape code has zero norm")
        self.shape_code = code
        self.unit_code = code / norm
        self.center = as_point(center)
        self.quality = float(quality)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "label": self.label,
            "center": self.center.tolist(),
            "quality": self.quality,
            "marked_changed": self.marked_changed,
            "observed": self.observed,
            "matched": self.matched,
            "shape_code": self.shape_code.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectInstance":
        obj = cls(d["id"], d["shape_code"], d["center"], d["quality"], d.get("label"))
        obj.marked_changed = bool(d.get("marked_changed", False))
        obj.observed = bool(d.get("observed", False))
        obj.matched = bool(d.get("matched", False))
        return obj

    def __repr__(self):
        return f"ObjectInstance(id={self.id}, center={np.round(self.center, 4).tolist()}, q={self.quality:.3f})"


@dataclass(frozen=True)
class NoiseModel:
    """Measurement noise for the synthetic descriptor and the scenario streams."""

    sigma_code: float = 0.02
    beta: float = 3.0
    sigma_center: float = 0.005
    q_max: float = 0.95
    gamma: float = 0.5
    sigma_rot: float = 0.0
    sigma_trans: float = 0.0
    offset_translation: float = 0.1
    offset_rotation_deg: float = 5.0
    sigma_point: float = 0.0

    def __post_init__(self):
        for name in ("sigma_code", "beta", "sigma_center", "sigma_rot", "sigma_trans",
                     "offset_translation", "offset_rotation_deg", "sigma_point", "gamma"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be non-negative")
        if not (0.0 < self.q_max <= 1.0):
            raise InvalidInputError("q_max must lie in (0, 1]")
