"""Training objectives of the shape-consistent descriptor, as plain functions.

Nothing here trains a model; the functions exist so the objectives can be
checked numerically (analytic gradients against finite differences).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import InvalidInputError, as_shape_code

CLAMP_EPS = 1e-7


def occupancy_loss(predicted, truth) -> float:
    """Mean binary cross-entropy between predicted occupancies and 0/1 labels."""
    p = np.asarray(predicted, dtype=float).reshape(-1)
    v = np.asarray(truth, dtype=float).reshape(-1)
    if p.shape != v.shape or p.size == 0:
        raise InvalidInputError("predictions and labels must have equal, non-zero length")
    p = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    return float(np.mean(-(v * np.log(p) + (1.0 - v) * np.log(1.0 - p))))


def occupancy_loss_grad(predicted, truth) -> np.ndarray:
    p = np.asarray(predicted, dtype=float).reshape(-1)
    v = np.asarray(truth, dtype=float).reshape(-1)
    if p.shape != v.shape or p.size == 0:
        raise InvalidInputError("predictions and labels must have equal, non-zero length")
    inside = (p > CLAMP_EPS) & (p < 1.0 - CLAMP_EPS)
    pc = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    return np.where(inside, (-v / pc + (1.0 - v) / (1.0 - pc)) / p.size, 0.0)


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise InvalidInputError("zero-norm shape code")
    return float(a @ b / (na * nb))


def _cos_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """d cos(a, b) / d a."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return b / (na * nb) - (a @ b) / (na * nb) * a / na**2


def triplet_shape_loss(anchor, positive, negative) -> float:
    a, p, n = (as_shape_code(x) for x in (anchor, positive, negative))
    return -_cos(a, p) + _cos(a, n)


def triplet_shape_loss_grad(anchor, positive, negative) -> tuple:
    """Partials of the triplet loss w.r.t. (anchor, positive, negative)."""
    a, p, n = (as_shape_code(x) for x in (anchor, positive, negative))
    for x in (a, p, n):
        if np.linalg.norm(x) == 0.0:
            raise InvalidInputError("zero-norm shape code")
    return -_cos_grad(a, p) + _cos_grad(a, n), -_cos_grad(p, a), _cos_grad(n, a)


@dataclass
class LabeledBatch:
    object_ids: np.ndarray   # (B,)
    codes: np.ndarray        # (B, k)

    def __post_init__(self):
        self.object_ids = np.asarray(self.object_ids)
        self.codes = np.asarray(self.codes, dtype=float)
        if self.codes.ndim != 2 or len(self.codes) != len(self.object_ids):
            raise InvalidInputError("codes must be (B, k) with one object id per row")
        ids, counts = np.unique(self.object_ids, return_counts=True)
        if len(ids) < 2:
            raise InvalidInputError("batch needs at least two objects to form negatives")
        if counts.min() < 2:
            raise InvalidInputError("every object needs at least two samples in the batch")
        if np.any(np.linalg.norm(self.codes, axis=1) == 0.0):
            raise InvalidInputError("zero-norm shape code in batch")

    @classmethod
    def from_samples(cls, samples: Sequence[tuple]) -> "LabeledBatch":
        ids = [s[0] for s in samples]
        codes = np.stack([as_shape_code(s[1]) for s in samples])
        return cls(np.asarray(ids), codes)


def _batch_hard_terms(batch: LabeledBatch):
    unit = batch.codes / np.linalg.norm(batch.codes, axis=1, keepdims=True)
    sim = unit @ unit.T
    same = batch.object_ids[:, None] == batch.object_ids[None, :]
    pos_mask = same & ~np.eye(len(sim), dtype=bool)
    hardest_pos = np.where(pos_mask, sim, np.inf).min(axis=1)
    hardest_neg = np.where(~same, sim, -np.inf).max(axis=1)
    return sim, pos_mask, same, hardest_pos, hardest_neg


def batch_hard_loss(batch: LabeledBatch) -> float:
    """Average over anchors of (-least similar positive + most similar negative).

    The positive minimum excludes the anchor itself.
    """
    _, _, _, hardest_pos, hardest_neg = _batch_hard_terms(batch)
    return float(np.mean(-hardest_pos + hardest_neg))


def batch_hard_loss_grad(batch: LabeledBatch, tie_tol: float = 1e-9):
    """Gradient w.r.t. every code, or ``None`` when a hardest pick is tied."""
    sim, pos_mask, same, hardest_pos, hardest_neg = _batch_hard_terms(batch)
    b = len(sim)
    grad = np.zeros_like(batch.codes)
    for j in range(b):
        pos = np.flatnonzero(pos_mask[j] & (np.abs(sim[j] - hardest_pos[j]) <= tie_tol))
        neg = np.flatnonzero(~same[j] & (np.abs(sim[j] - hardest_neg[j]) <= tie_tol))
        if len(pos) != 1 or len(neg) != 1:
            return None
        kp, kn = pos[0], neg[0]
        a = batch.codes[j]
        grad[j] += -_cos_grad(a, batch.codes[kp]) + _cos_grad(a, batch.codes[kn])
        grad[kp] += -_cos_grad(batch.codes[kp], a)
        grad[kn] += _cos_grad(batch.codes[kn], a)
    return grad / b


def combined_loss(l_occ: float, l_shape: float, alpha: float = 0.01) -> float:
    if alpha < 0:
        raise InvalidInputError("alpha must be non-negative")
    return l_occ + alpha * l_shape


@dataclass(frozen=True)
class GradientCheck:
    max_relative_error: float
    skipped: bool = False


def _relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _central_difference(f, x: np.ndarray, h: float) -> np.ndarray:
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * h)
    return g


def loss_gradient_check(loss: str, inputs, h: float = 1e-5) -> GradientCheck:
    """Compare analytic partials of a loss with central finite differences.

    ``loss`` is one of ``"occupancy"`` (inputs: predictions, labels),
    ``"triplet"`` (inputs: anchor, positive, negative) or ``"batch_hard"``
    (inputs: a LabeledBatch). A tie in the batch-hard min/max has no gradient
    and yields ``skipped=True``.
    """
    if not (0.0 < h <= 1e-3):
        raise InvalidInputError("h must lie in (0, 1e-3]")
    if loss == "occupancy":
        pred, truth = inputs
        x = np.array(pred, dtype=float).reshape(-1)
        analytic = occupancy_loss_grad(x, truth)
        numeric = _central_difference(lambda p: occupancy_loss(p, truth), x, h)
        return GradientCheck(_relative_error(analytic, numeric))
    if loss == "triplet":
        x = np.stack([as_shape_code(v) for v in inputs]).astype(float)
        analytic = np.stack(triplet_shape_loss_grad(*x))
        numeric = _central_difference(lambda t: triplet_shape_loss(t[0], t[1], t[2]), x, h)
        return GradientCheck(_relative_error(analytic, numeric))
    if loss == "batch_hard":
        batch = inputs
        analytic = batch_hard_loss_grad(batch)
        if analytic is None:
            return GradientCheck(float("nan"), skipped=True)
        x = batch.codes.copy()
        numeric = _central_difference(
            lambda c: batch_hard_loss(LabeledBatch(batch.object_ids, c)), x, h
        )
        return GradientCheck(_relative_error(analytic, numeric))
    raise InvalidInputError(f"unknown loss {loss!r}")
