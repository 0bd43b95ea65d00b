"""Mode-separation metrics for class-conditional 2D samples."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import MixtureSpec


@dataclass
class MetricsReport:
    counts: list[int]
    condition_consistency: float
    centroid_shift: float
    per_class_consistency: list[float]
    per_class_shift: list[float]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


TIE_RTOL = 1e-12


def assign_modes(points, spec: MixtureSpec) -> np.ndarray:
    """Nearest-center label per point; ties go to the lowest class index.

    Squared distances within ``TIE_RTOL`` (relative) of the minimum count as
    tied, so geometric ties survive rounding in the center coordinates.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    d2 = np.sum((points[:, None, :] - spec.centers[None, :, :]) ** 2, axis=-1)
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    lo = d2.min(axis=1, keepdims=True)
    tied = d2 <= lo + TIE_RTOL * (1.0 + lo)
    return np.argmax(tied, axis=1)  # first True


def _buckets(labels, K):
    labels = np.asarray(labels, dtype=np.int64)
    missing = [k for k in range(K) if not np.any(labels == k)]
    if missing:
        raise ValueError(f"no samples for condition(s) {missing}")
    return labels


def condition_consistency(points, labels, spec: MixtureSpec) -> float:
    """Fraction of samples whose nearest center is their conditioning class."""
    labels = _buckets(labels, spec.num_classes)
    return float(np.mean(assign_modes(points, spec) == labels))


def centroid_shift(points, labels, spec: MixtureSpec) -> float:
    labels = _buckets(labels, spec.num_classes)
    return float(np.mean(_per_class_shift(np.asarray(points).reshape(-1, 2), labels, spec)))


def _per_class_shift(points, labels, spec):
    return np.array([np.linalg.norm(points[labels == k].mean(axis=0) - spec.centers[k])
                     for k in range(spec.num_classes)])


def evaluate(points, labels, spec: MixtureSpec) -> MetricsReport:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    labels = _buckets(labels, spec.num_classes)
    hit = assign_modes(points, spec) == labels
    K = spec.num_classes
    shifts = _per_class_shift(points, labels, spec)
    return MetricsReport(
        counts=[int(np.sum(labels == k)) for k in range(K)],
        condition_consistency=float(hit.mean()),
        centroid_shift=float(shifts.mean()),
        per_class_consistency=[float(hit[labels == k].mean()) for k in range(K)],
        per_class_shift=[float(s) for s in shifts],
    )
