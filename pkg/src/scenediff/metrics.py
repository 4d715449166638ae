"""Object-level precision / recall."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def metrics_from_counts(tp: int, fp: int, fn: int) -> Metrics:
    """Precision and recall; an empty denominator reports 1.0 and sets ``degenerate``."""
    degenerate = False
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision, degenerate = 1.0, True
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall, degenerate = 1.0, True
    return Metrics(tp, fp, fn, precision, recall, degenerate)


def compute_metrics(detections: Mapping[int, bool], labels: Mapping[int, str]) -> Metrics:
    """Score per-object change decisions against ground-truth labels.

    ``detections`` maps object id to whether any changed or removed verdict
    was attributed to it; objects absent from it count as not detected. Every
    label other than ``unchanged`` is a positive.
    """
    tp = fp = fn = 0
    for gid, label in labels.items():
        positive = label != "unchanged"
        detected = bool(detections.get(gid, False))
        if detected and positive:
            tp += 1
        elif detected:
            fp += 1
        elif positive:
            fn += 1
    return metrics_from_counts(tp, fp, fn)
