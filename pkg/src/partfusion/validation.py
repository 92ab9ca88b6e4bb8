"""Input validation helpers shared by the estimator API and the operators."""

from __future__ import annotations

import numpy as np

PROB_ROW_TOL = 1e-9


def check_points(points, name: str = "points") -> np.ndarray:
    """Validate an N x 3 float64 position array."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{name}: expected an N x 3 array, got shape {pts.shape}")
    if pts.shape[0] < 1:
        raise ValueError(f"{name}: needs at least one point")
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{name}: contains non-finite entries")
    return pts


def check_offsets(offsets, n_points: int, name: str = "offsets") -> np.ndarray:
    off = np.asarray(offsets, dtype=np.float64)
    if off.shape != (n_points, 3):
        raise ValueError(f"{name}: expected shape ({n_points}, 3), got {off.shape}")
    if not np.all(np.isfinite(off)):
        raise ValueError(f"{name}: contains non-finite entries")
    return off


def check_prob_matrix(p, name: str = "P") -> np.ndarray:
    """Validate an N x c semantic probability matrix (rows sum to one)."""
    mat = np.asarray(p, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D matrix, got ndim={mat.ndim}")
    if np.any(mat < -PROB_ROW_TOL) or np.any(mat > 1.0 + PROB_ROW_TOL):
        raise ValueError(f"{name}: entries must lie in [0, 1]")
    row_sums = mat.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > PROB_ROW_TOL):
        worst = int(np.abs(row_sums - 1.0).argmax())
        raise ValueError(
            f"{name}: row {worst} sums to {row_sums[worst]!r}, expected 1"
        )
    return mat


def check_feature_matrix(f, n_rows: int | None = None, name: str = "F") -> np.ndarray:
    mat = np.asarray(f, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D matrix, got ndim={mat.ndim}")
    if n_rows is not None and mat.shape[0] != n_rows:
        raise ValueError(f"{name}: expected {n_rows} rows, got {mat.shape[0]}")
    if not np.all(np.isfinite(mat)):
        raise ValueError(f"{name}: contains non-finite entries")
    return mat


def check_labels(labels, n_points: int, n_classes: int, name: str = "labels") -> np.ndarray:
    """Validate 1-based semantic labels in 1..n_classes."""
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (n_points,):
        raise ValueError(f"{name}: expected shape ({n_points},), got {lab.shape}")
    if lab.min(initial=1) < 1 or lab.max(initial=1) > n_classes:
        raise ValueError(f"{name}: labels must lie in 1..{n_classes}")
    return lab


def check_instance_ids(ids, n_points: int, name: str = "instance ids") -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.shape != (n_points,):
        raise ValueError(f"{name}: expected shape ({n_points},), got {arr.shape}")
    if arr.min(initial=0) < 0:
        raise ValueError(f"{name}: ids must be non-negative")
    return arr


def check_is_fitted(estimator, attribute: str):
    if not hasattr(estimator, attribute):
        raise RuntimeError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first"
        )
