"""Nearest-neighbor point differencing at the object level (comparison baseline).

A target point is a change point when no source point lies within ``d`` of
it; an object is changed when more than a fraction ``r`` of its target points
are change points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import InvalidInputError, as_points


@dataclass(frozen=True)
class NnParams:
    d: float = 0.002
    r: float = 0.3

    def __post_init__(self):
        if self.d <= 0 or not (0.0 < self.r < 1.0):
            raise InvalidInputError("need d > 0 and r in (0, 1)")


class SourceIndex:
    """KD-tree over a (fused) source cloud, reused across many target queries."""

    def __init__(self, source_cloud):
        self.points = as_points(source_cloud)
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self):
        return len(self.points)

    def unmatched_fraction(self, target_cloud, d: float) -> float:
        tgt = as_points(target_cloud)
        if len(tgt) == 0:
            raise InvalidInputError("target cloud is empty")
        if self._tree is None:
            return 1.0
        dist, _ = self._tree.query(tgt, k=1)
        return float(np.count_nonzero(dist > d)) / len(tgt)


def nn_changed(target_cloud, source_cloud, p: NnParams = NnParams()) -> tuple[bool, float]:
    """(changed, fraction of target points with no source point within ``p.d``)."""
    index = source_cloud if isinstance(source_cloud, SourceIndex) else SourceIndex(source_cloud)
    fraction = index.unmatched_fraction(target_cloud, p.d)
    return fraction > p.r, fraction


class OnlineNnBaseline:
    """Marks an object changed the first time one of its views exceeds ``r``.

    Target views are compared against everything the source session saw, so
    an object standing where a similar-looking one used to be is not flagged.
    """

    def __init__(self, source_cloud, params: NnParams = NnParams()):
        self.params = params
        self.index = SourceIndex(source_cloud)
        self.changed: dict[int, int] = {}    # object label -> frame first flagged
        self.max_fraction: dict[int, float] = {}

    def process(self, label: int, cloud, frame_index: int = -1) -> bool:
        changed, fraction = nn_changed(cloud, self.index, self.params)
        self.max_fraction[label] = max(fraction, self.max_fraction.get(label, 0.0))
        if changed and label not in self.changed:
            self.changed[label] = frame_index
        return label in self.changed

    def check_removed(self, source_object_clouds: dict, target_cloud) -> list:
        """Source objects whose fused cloud mostly lacks target support.

        ``source_object_clouds`` should only hold objects whose location the
        target session actually viewed.
        """
        index = SourceIndex(target_cloud)
        out = []
        for label in sorted(source_object_clouds):
            changed, fraction = nn_changed(source_object_clouds[label], index, self.params)
            if changed:
                out.append(label)
                self.changed.setdefault(label, -1)
        return out
