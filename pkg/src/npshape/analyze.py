"""PCA projection and clustering metrics for embedding spaces.

Conventions, since they matter for reproducibility: the variance
decomposition divides by N (so between + within equals the trace of the
biased covariance exactly), while PCA's explained variance divides by N-1.
Distances are Euclidean throughout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError


@dataclass
class PcaProjection:
    mean: np.ndarray              # D
    components: np.ndarray        # 2 x D, orthonormal rows
    projected: np.ndarray         # N x 2
    explained_variance: np.ndarray  # 2, descending


@dataclass
class ClusterMetrics:
    between_class_variance: float
    within_class_variance: float
    silhouette: float
    n_per_class: dict


@dataclass
class StageTimeline:
    stage_ids: list
    metrics: list  # ClusterMetrics per stage

    def __post_init__(self):
        if len(self.stage_ids) != len(set(self.stage_ids)):
            raise ValidationError("stage ids must be unique")


def _fix_sign(v: np.ndarray) -> np.ndarray:
    # deterministic orientation: the largest-|entry| coordinate is positive
    return -v if v[np.argmax(np.abs(v))] < 0 else v


def pca_fit_transform(X) -> PcaProjection:
    """Top-2 principal directions via eigendecomposition of the covariance."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValidationError("PCA needs an N x D matrix with N >= 2")
    if X.shape[1] < 2:
        raise ValidationError("PCA to 2 components needs D >= 2")
    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / (X.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:2]
    explained = np.maximum(eigvals[order], 0.0)
    if explained[0] <= 0.0:
        # zero total variance: any orthonormal pair works; pin the canonical one
        components = np.zeros((2, X.shape[1]))
        components[0, 0] = 1.0
        components[1, 1] = 1.0
        explained = np.zeros(2)
    else:
        components = np.stack([_fix_sign(eigvecs[:, i]) for i in order])
    return PcaProjection(mean=mean, components=components,
                         projected=centered @ components.T,
                         explained_variance=explained)


def between_within_variance(X, y):
    """Weighted scatter of class centroids about the global mean, and of
    points about their class centroid. Both divide by N, so they sum to the
    trace of the total (biased) covariance."""
    X = np.asarray(X, dtype=np.float64)
    y = [str(v) for v in y]
    if X.shape[0] == 0:
        raise ValidationError("empty input")
    if X.shape[0] != len(y):
        raise ValidationError(f"{X.shape[0]} rows but {len(y)} labels")
    n = X.shape[0]
    mu = X.mean(axis=0)
    between = 0.0
    within = 0.0
    for cls in sorted(set(y)):
        idx = [i for i, lab in enumerate(y) if lab == cls]
        rows = X[idx]
        mu_k = rows.mean(axis=0)
        between += len(idx) / n * float(((mu_k - mu) ** 2).sum())
        within += len(idx) / n * float(((rows - mu_k) ** 2).sum() / len(idx))
    return between, within


def total_variance(X) -> float:
    """Trace of the biased covariance (divide by N)."""
    X = np.asarray(X, dtype=np.float64)
    return float(((X - X.mean(axis=0)) ** 2).sum() / X.shape[0])


def _dist(a, b) -> float:
    d = a - b
    return math.sqrt(math.fsum(d * d))


def silhouette(X, y) -> float:
    """Mean silhouette value over all points.

    s(i) = (b - a)/max(a, b) with a the mean distance to same-class points
    (excluding self) and b the smallest mean distance to another class.
    Points in singleton classes contribute 0. Sums are exactly rounded
    (math.fsum), so the result does not depend on accumulation order.
    """
    X = np.asarray(X, dtype=np.float64)
    y = [str(v) for v in y]
    n = X.shape[0]
    if len(set(y)) < 2:
        raise ValidationError("silhouette needs >= 2 classes")
    if n < 3:
        raise ValidationError("silhouette needs N >= 3")
    by_class = {}
    for i, lab in enumerate(y):
        by_class.setdefault(lab, []).append(i)
    dmat = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dmat[i, j] = dmat[j, i] = _dist(X[i], X[j])
    scores = []
    for i in range(n):
        own = by_class[y[i]]
        if len(own) == 1:
            scores.append(0.0)
            continue
        a = math.fsum(dmat[i, j] for j in own if j != i) / (len(own) - 1)
        b = min(math.fsum(dmat[i, j] for j in members) / len(members)
                for cls, members in by_class.items() if cls != y[i])
        denom = max(a, b)
        scores.append((b - a) / denom if denom > 0 else 0.0)
    return math.fsum(scores) / n


def cluster_metrics(X, y) -> ClusterMetrics:
    between, within = between_within_variance(X, y)
    counts = {}
    for lab in y:
        counts[str(lab)] = counts.get(str(lab), 0) + 1
    return ClusterMetrics(between_class_variance=between,
                          within_class_variance=within,
                          silhouette=silhouette(X, y),
                          n_per_class=counts)


def stage_timeline(stages) -> StageTimeline:
    """Per-stage ClusterMetrics for an ordered list of (id, X, y) stages."""
    ids = [s[0] for s in stages]
    metrics = [cluster_metrics(s[1], s[2]) for s in stages]
    return StageTimeline(stage_ids=ids, metrics=metrics)


def timeline_to_csv(timeline: StageTimeline, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stage", "between_class_variance", "within_class_variance",
                    "silhouette"])
        for sid, m in zip(timeline.stage_ids, timeline.metrics):
            w.writerow([sid, repr(m.between_class_variance),
                        repr(m.within_class_variance), repr(m.silhouette)])
    return path


def projection_to_csv(proj: PcaProjection, ids, labels, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "pc1", "pc2", "label"])
        for i, (pid, lab) in enumerate(zip(ids, labels)):
            w.writerow([pid, repr(float(proj.projected[i, 0])),
                        repr(float(proj.projected[i, 1])), lab])
    return path
