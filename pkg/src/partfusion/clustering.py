"""Test-time grouping of offset-shifted points into part instances.

Points are moved to their predicted instance center and then pushed a fixed
distance away from their predicted semantic region center, which separates
same-class instances whose centers nearly coincide. A flat-kernel mean-shift
(every point a seed, modes within the bandwidth merged by support) groups the
shifted points per predicted semantic class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin

from .validation import check_offsets, check_points, check_prob_matrix


@dataclass
class ClusterParams:
    bandwidth: float = 0.1
    push_scale: float = 0.05   # distance added away from the region center
    epsilon: float = 1e-8      # degenerate push-direction guard
    max_iter: int = 300
    tol: float = 1e-6

    def validate(self) -> "ClusterParams":
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.push_scale < 0:
            raise ValueError("push_scale must be non-negative")
        if self.epsilon <= 0 or self.tol <= 0 or self.max_iter < 1:
            raise ValueError("epsilon, tol and max_iter must be positive")
        return self


@dataclass
class LevelPrediction:
    """One level's predicted grouping: instance id per point, label and
    confidence per instance."""

    point_inst: np.ndarray   # (N,) int64
    labels: np.ndarray       # (M,) int64, 1-based semantic label per instance
    confidences: np.ndarray  # (M,) float64 in [0, 1]

    @property
    def n_instances(self) -> int:
        return len(self.labels)

    def point_sem(self) -> np.ndarray:
        return self.labels[self.point_inst]


@dataclass
class InstancePrediction:
    levels: list[LevelPrediction] = field(default_factory=list)

    @property
    def n_levels(self) -> int:
        return len(self.levels)


def apply_region_push(points, inst_offset, region_offset, params: ClusterParams):
    """Shift each point to its predicted instance center, then push it
    ``push_scale`` away from the predicted semantic region center.

    When the two predicted centers are closer than ``epsilon`` the push
    direction is undefined and omitted.
    """
    params.validate()
    pts = check_points(points)
    o_i = check_offsets(inst_offset, pts.shape[0], "inst_offset")
    o_s = check_offsets(region_offset, pts.shape[0], "region_offset")
    direction = o_i - o_s
    norms = np.linalg.norm(direction, axis=1, keepdims=True)
    push = np.where(
        norms >= params.epsilon,
        params.push_scale * direction / np.maximum(norms, params.epsilon),
        0.0,
    )
    return pts + o_i + push


def mean_shift(points, bandwidth, max_iter: int = 300, tol: float = 1e-6,
               block: int = 512):
    """Flat-kernel mean-shift with every point as a seed.

    Returns (modes, assignment): converged modes deduplicated by merging any
    pair closer than the bandwidth (the higher-support mode survives, ties to
    the lower seed index), and each point assigned to the nearest survivor.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("mean_shift: expected a non-empty N x d array")
    if bandwidth <= 0:
        raise ValueError("mean_shift: bandwidth must be positive")
    n = X.shape[0]
    bw2 = bandwidth * bandwidth
    means = X.copy()
    active = np.arange(n)
    for _ in range(max_iter):
        if active.size == 0:
            break
        still = []
        for start in range(0, active.size, block):
            idx = active[start:start + block]
            diff = means[idx][:, None, :] - X[None, :, :]
            within = (diff * diff).sum(axis=2) <= bw2
            counts = within.sum(axis=1)
            # A mean can drift outside every point's radius; freeze it there.
            ok = counts > 0
            new = means[idx].copy()
            new[ok] = (within[ok] @ X) / counts[ok, None]
            shift = np.linalg.norm(new - means[idx], axis=1)
            means[idx] = new
            still.append(idx[(shift > tol) & ok])
        active = np.concatenate(still) if still else np.empty(0, dtype=int)

    support = np.empty(n, dtype=np.int64)
    for start in range(0, n, block):
        diff = means[start:start + block, None, :] - X[None, :, :]
        support[start:start + block] = (
            (diff * diff).sum(axis=2) <= bw2
        ).sum(axis=1)

    order = np.lexsort((np.arange(n), -support))
    kept: list[int] = []
    for i in order:
        m = means[i]
        if all(np.linalg.norm(m - means[j]) >= bandwidth for j in kept):
            kept.append(int(i))
    modes = means[kept]
    d2 = ((X[:, None, :] - modes[None, :, :]) ** 2).sum(axis=2)
    assignment = d2.argmin(axis=1)
    return modes, assignment


class FlatMeanShift(BaseEstimator, ClusterMixin):
    """Mean-shift clusterer with a flat kernel and all-points seeding.

    Attributes after ``fit``: ``cluster_centers_`` (M x d) and ``labels_``
    (per-sample mode index).
    """

    def __init__(self, bandwidth=0.1, max_iter=300, tol=1e-6):
        self.bandwidth = bandwidth
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        centers, labels = mean_shift(X, self.bandwidth, self.max_iter, self.tol)
        self.cluster_centers_ = centers
        self.labels_ = labels
        return self

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        d2 = ((X[:, None, :] - self.cluster_centers_[None, :, :]) ** 2).sum(axis=2)
        return d2.argmin(axis=1)


def cluster_instances(points, sem_probs, inst_offsets, region_offsets,
                      params: ClusterParams) -> InstancePrediction:
    """Group points into instances per level.

    Per level: points take their row-argmax semantic label, are shifted by
    :func:`apply_region_push`, and mean-shift runs within each predicted
    class. Instance ids are renumbered globally in (class, mode) order; an
    instance's confidence is the mean class probability of its members.
    """
    params.validate()
    pts = check_points(points)
    n = pts.shape[0]
    prediction = InstancePrediction()
    for p_sem, o_i, o_s in zip(sem_probs, inst_offsets, region_offsets):
        p_sem = check_prob_matrix(p_sem)
        shifted = apply_region_push(pts, o_i, o_s, params)
        point_labels = p_sem.argmax(axis=1) + 1  # ties to the lowest class
        point_inst = np.full(n, -1, dtype=np.int64)
        labels: list[int] = []
        confidences: list[float] = []
        next_id = 0
        for m in range(1, p_sem.shape[1] + 1):
            mask = point_labels == m
            if not mask.any():
                continue
            idx = np.flatnonzero(mask)
            modes, assignment = mean_shift(
                shifted[idx], params.bandwidth, params.max_iter, params.tol
            )
            for mode in range(len(modes)):
                members = idx[assignment == mode]
                if members.size == 0:  # mode outdrawn by a nearer survivor
                    continue
                point_inst[members] = next_id
                labels.append(m)
                confidences.append(float(p_sem[members, m - 1].mean()))
                next_id += 1
        prediction.levels.append(LevelPrediction(
            point_inst,
            np.asarray(labels, dtype=np.int64),
            np.asarray(confidences, dtype=np.float64),
        ))
    return prediction
