"""Synthetic hierarchical part-labeled point clouds.

Four procedural families (n-blade-scissor, legged-table, multi-lamp,
wheelset) built from jittered primitives. Every shape carries, per
hierarchy level, a semantic label and an instance id per point plus
precomputed offsets to the instance centroid and to the semantic region
center (the mean of same-class instance centroids).

Coordinates are normalized into the unit ball and then quantized to 9
significant digits so that the on-disk text format round-trips exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .validation import check_instance_ids, check_labels, check_points

FAMILIES = ("n-blade-scissor", "legged-table", "multi-lamp", "wheelset")

# Fixed per-family stream tags so different families never share RNG streams.
_FAMILY_TAG = {name: i + 1 for i, name in enumerate(FAMILIES)}


@dataclass
class LevelLabels:
    """Per-point annotations of one hierarchy level."""

    sem: np.ndarray            # (N,) int64, 1-based semantic labels
    inst: np.ndarray           # (N,) int64, non-negative instance ids
    inst_offset: np.ndarray    # (N, 3) offset to the instance centroid
    region_offset: np.ndarray  # (N, 3) offset to the semantic region center

    def copy(self) -> "LevelLabels":
        return LevelLabels(
            self.sem.copy(), self.inst.copy(),
            self.inst_offset.copy(), self.region_offset.copy(),
        )


@dataclass
class LabeledShape:
    """Unit-ball point cloud with K levels of (semantic, instance) labels."""

    points: np.ndarray               # (N, 3)
    class_counts: tuple[int, ...]    # semantic class count per level
    levels: list[LevelLabels]

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def copy(self) -> "LabeledShape":
        return LabeledShape(
            self.points.copy(), tuple(self.class_counts),
            [lv.copy() for lv in self.levels],
        )

    def validate(self, unit_ball_slack: float = 1e-9) -> "LabeledShape":
        """Check the structural invariants; returns self."""
        pts = check_points(self.points)
        n = pts.shape[0]
        if len(self.levels) != len(self.class_counts):
            raise ValueError("level count does not match class_counts")
        radius = np.linalg.norm(pts, axis=1).max() if n else 0.0
        if radius > 1.0 + unit_ball_slack:
            raise ValueError(f"points escape the unit ball (max norm {radius})")
        prev_inst = None
        for k, (lv, c) in enumerate(zip(self.levels, self.class_counts)):
            check_labels(lv.sem, n, c, name=f"level {k + 1} labels")
            check_instance_ids(lv.inst, n, name=f"level {k + 1} instance ids")
            for arr, what in ((lv.inst_offset, "inst"), (lv.region_offset, "region")):
                if arr.shape != (n, 3) or not np.all(np.isfinite(arr)):
                    raise ValueError(f"level {k + 1}: bad {what} offsets")
            # One semantic label per instance.
            for iid in np.unique(lv.inst):
                labs = np.unique(lv.sem[lv.inst == iid])
                if labs.size != 1:
                    raise ValueError(
                        f"level {k + 1}: instance {iid} spans labels {labs.tolist()}"
                    )
            # Finer levels refine coarser partitions.
            if prev_inst is not None:
                for iid in np.unique(lv.inst):
                    parents = np.unique(prev_inst[lv.inst == iid])
                    if parents.size != 1:
                        raise ValueError(
                            f"level {k + 1}: instance {iid} crosses coarser instances"
                        )
            prev_inst = lv.inst
        return self


@dataclass
class ShapeSpec:
    """Parameters of one synthetic family."""

    family: str = "legged-table"
    parts: int = 4          # blades / legs / heads / wheels
    jitter: float = 0.08    # relative jitter on primitive dimensions
    points: int = 1024

    def validate(self) -> "ShapeSpec":
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.parts < 1:
            raise ValueError("parts must be >= 1")
        if self.points < 64:
            raise ValueError("points per shape must be >= 64")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")
        return self


@dataclass
class AugmentParams:
    """Train-time augmentation bounds (uniform scale, small rotation, shift)."""

    scale_range: tuple[float, float] = (0.75, 1.25)
    rotation_deg: float = 10.0
    translation: float = 0.125

    def validate(self) -> "AugmentParams":
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError("scale range must be positive and ordered")
        if self.rotation_deg < 0 or self.translation < 0:
            raise ValueError("rotation and translation bounds must be non-negative")
        return self


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------


def normalize_to_unit_sphere(points: np.ndarray) -> np.ndarray:
    """Center at the centroid and scale the farthest point onto the unit sphere.

    Zero-extent inputs map to all-zeros.
    """
    pts = check_points(points)
    centered = pts - pts.mean(axis=0, keepdims=True)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius == 0.0:
        return np.zeros_like(centered)
    return centered / radius


def quantize_coords(points: np.ndarray, digits: int = 9) -> np.ndarray:
    """Round coordinates through their text representation (9 significant
    digits by default) so serialization is lossless."""
    flat = np.asarray(points, dtype=np.float64).ravel()
    out = np.fromiter(
        (float(f"{v:.{digits}g}") for v in flat), dtype=np.float64, count=flat.size
    )
    return out.reshape(np.asarray(points).shape)


def compute_gt_offsets(
    points: np.ndarray, sem: np.ndarray, inst: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Offsets to instance centroids and to semantic region centers.

    The region center of class m is the unweighted mean of the centroids of
    the instances labeled m.
    """
    pts = check_points(points)
    n = pts.shape[0]
    inst_offset = np.zeros((n, 3))
    region_offset = np.zeros((n, 3))
    ids = np.unique(inst)
    centers = {}
    inst_label = {}
    for iid in ids:
        mask = inst == iid
        centers[int(iid)] = pts[mask].mean(axis=0)
        inst_offset[mask] = centers[int(iid)] - pts[mask]
        inst_label[int(iid)] = int(sem[mask][0])
    for m in np.unique(sem):
        members = [centers[i] for i in sorted(centers) if inst_label[i] == int(m)]
        region = np.mean(members, axis=0)
        mask = sem == m
        region_offset[mask] = region - pts[mask]
    return inst_offset, region_offset


def attach_gt_centers(shape: LabeledShape) -> LabeledShape:
    """Recompute both offset fields of every level from points and labels."""
    out = shape.copy()
    for lv in out.levels:
        lv.inst_offset, lv.region_offset = compute_gt_offsets(
            out.points, lv.sem, lv.inst
        )
    return out


def duplicate_missing_levels(
    shape: LabeledShape, k: int, annotated_positions: tuple[int, ...] | None = None
) -> LabeledShape:
    """Expand to exactly ``k`` levels, copying each missing level from the
    nearest coarser annotated one.

    ``annotated_positions`` gives the 1-based target position of each existing
    level (default: 1..n_levels); position 1 must be annotated.
    """
    n_lv = shape.n_levels
    if n_lv < 1:
        raise ValueError("shape has no levels")
    if k < n_lv:
        raise ValueError(f"target level count {k} is below the existing {n_lv}")
    positions = tuple(annotated_positions) if annotated_positions else tuple(
        range(1, n_lv + 1)
    )
    if len(positions) != n_lv:
        raise ValueError("annotated_positions must name every existing level")
    if list(positions) != sorted(set(positions)) or positions[0] != 1 or positions[-1] > k:
        raise ValueError(f"invalid annotated positions {positions} for K={k}")
    by_pos = dict(zip(positions, range(n_lv)))
    levels: list[LevelLabels] = []
    counts: list[int] = []
    last = 0
    for pos in range(1, k + 1):
        if pos in by_pos:
            last = by_pos[pos]
        levels.append(shape.levels[last].copy())
        counts.append(shape.class_counts[last])
    return LabeledShape(shape.points.copy(), tuple(counts), levels)


def rotation_matrix(angles_deg: np.ndarray) -> np.ndarray:
    """Rotation from per-axis angles, composed as Rz @ Ry @ Rx."""
    ax, ay, az = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def augment(shape: LabeledShape, params: AugmentParams, seed: int) -> LabeledShape:
    """One random uniform scale, small rotation and per-axis translation.

    Points get the full similarity transform; both offset fields rotate and
    scale but do not translate (they are differences of positions).
    """
    params.validate()
    rng = np.random.default_rng(np.random.SeedSequence([0xA46, seed & 0xFFFFFFFF]))
    s = rng.uniform(*params.scale_range)
    angles = rng.uniform(-params.rotation_deg, params.rotation_deg, size=3)
    t = rng.uniform(-params.translation, params.translation, size=3)
    rot = rotation_matrix(angles)
    out = shape.copy()
    out.points = (s * (shape.points @ rot.T)) + t
    for lv in out.levels:
        lv.inst_offset = s * (lv.inst_offset @ rot.T)
        lv.region_offset = s * (lv.region_offset @ rot.T)
    return out


# ---------------------------------------------------------------------------
# Primitive surface samplers
# ---------------------------------------------------------------------------


def _sample_box(rng, center, half, n):
    half = np.asarray(half, dtype=np.float64)
    hx, hy, hz = half
    face_areas = np.array([hy * hz, hx * hz, hx * hy])
    axis = rng.choice(3, size=n, p=face_areas / face_areas.sum())
    sign = rng.choice([-1.0, 1.0], size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    for a in range(3):
        mask = axis == a
        others = [i for i in range(3) if i != a]
        pts[mask, a] = sign[mask] * half[a]
        pts[mask, others[0]] = uv[mask, 0] * half[others[0]]
        pts[mask, others[1]] = uv[mask, 1] * half[others[1]]
    return pts + np.asarray(center, dtype=np.float64)


def _axis_frame(axis):
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    helper = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(a, helper)
    u /= np.linalg.norm(u)
    v = np.cross(a, u)
    return a, u, v


def _sample_cylinder(rng, p0, p1, radius, n, caps=True):
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    a, u, v = _axis_frame(p1 - p0)
    length = np.linalg.norm(p1 - p0)
    lateral = 2 * math.pi * radius * length
    cap = math.pi * radius * radius if caps else 0.0
    probs = np.array([lateral, cap, cap])
    kind = rng.choice(3, size=n, p=probs / probs.sum())
    theta = rng.uniform(0.0, 2 * math.pi, size=n)
    ring = np.outer(np.cos(theta), u) + np.outer(np.sin(theta), v)
    pts = np.empty((n, 3))
    lat = kind == 0
    tpos = rng.uniform(0.0, length, size=n)
    pts[lat] = p0 + np.outer(tpos[lat], a) + radius * ring[lat]
    for which, base in ((1, p0), (2, p1)):
        mask = kind == which
        rr = radius * np.sqrt(rng.uniform(0.0, 1.0, size=int(mask.sum())))
        pts[mask] = base + rr[:, None] * ring[mask]
    return pts


def _sample_sphere(rng, center, radius, n):
    g = rng.normal(size=(n, 3))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return np.asarray(center, dtype=np.float64) + radius * g


def _sample_torus(rng, center, axis, ring_radius, tube_radius, n):
    a, u, v = _axis_frame(axis)
    theta = rng.uniform(0.0, 2 * math.pi, size=n)
    phi = rng.uniform(0.0, 2 * math.pi, size=n)
    radial = np.outer(np.cos(theta), u) + np.outer(np.sin(theta), v)
    pts = (
        (ring_radius + tube_radius * np.cos(phi))[:, None] * radial
        + tube_radius * np.sin(phi)[:, None] * a
    )
    return pts + np.asarray(center, dtype=np.float64)


def _allocate_points(weights, total, minimum=4):
    """Deterministic proportional allocation summing exactly to ``total``."""
    w = np.asarray(weights, dtype=np.float64)
    if minimum * len(w) > total:
        raise ValueError(
            f"cannot place {len(w)} parts with at least {minimum} points each "
            f"into {total} points"
        )
    raw = w / w.sum() * total
    counts = np.maximum(np.floor(raw).astype(int), minimum)
    # Distribute any deficit by descending remainder, remove any surplus from
    # the largest buckets; ties resolve by index.
    order = np.lexsort((np.arange(len(w)), -(raw - np.floor(raw))))
    i = 0
    while counts.sum() < total:
        counts[order[i % len(w)]] += 1
        i += 1
    while counts.sum() > total:
        big = int(np.argmax(counts))
        if counts[big] <= minimum:
            break
        counts[big] -= 1
    return counts


# ---------------------------------------------------------------------------
# Families. Each builder returns (parts, class_counts, annotated_positions)
# where parts is a list of (points, ((sem, inst) per level)).
# ---------------------------------------------------------------------------


def _jit(rng, base, jitter):
    return base * (1.0 + jitter * rng.uniform(-1.0, 1.0))


def _build_scissor(rng, spec):
    n = spec.parts
    j = spec.jitter
    blade_len = _jit(rng, 1.5, j)
    blade_wid = _jit(rng, 0.18, j)
    blade_thick = _jit(rng, 0.045, j)
    gap = _jit(rng, 0.055, j)
    handle_r = _jit(rng, 0.16, j)
    handle_spread = _jit(rng, 0.35, j)
    parts = []
    weights = []
    for i in range(n):
        y = (i - (n - 1) / 2.0) * gap
        parts.append((
            ("box", (blade_len / 2 + 0.05, y, 0.0),
             (blade_len / 2, blade_wid / 2, blade_thick / 2)),
            ((1, 0), (1, i)),
        ))
        weights.append(blade_len * blade_wid)
    for i in range(n):
        y = (i - (n - 1) / 2.0) * handle_spread
        center = (-(0.25 + handle_r), y, 0.0)
        parts.append((
            ("torus", center, (0.0, 1.0, 0.0), handle_r, 0.03),
            ((2, 1), (2, n + i)),
        ))
        weights.append(2.0 * handle_r * 0.5)
    return parts, weights, (2, 2), (1, 2)


def _build_table(rng, spec):
    n = spec.parts
    j = spec.jitter
    top_w = _jit(rng, 1.0, j)
    top_d = _jit(rng, 0.8, j)
    top_t = _jit(rng, 0.1, j)
    height = _jit(rng, 1.0, j)
    leg_r = _jit(rng, 0.05, j)
    foot_h = _jit(rng, 0.11, j)
    top_z = height / 2
    parts = [(
        ("box", (0.0, 0.0, top_z), (top_w / 2, top_d / 2, top_t / 2)),
        ((1, 0), (1, 0), (1, 0)),
    )]
    weights = [top_w * top_d * 2]
    for i in range(n):
        ang = 2 * math.pi * i / n + rng.uniform(-0.05, 0.05)
        x = 0.42 * top_w * math.cos(ang)
        y = 0.42 * top_d * math.sin(ang)
        z0 = -height / 2
        pole = ("cyl", (x, y, z0 + foot_h), (x, y, top_z - top_t / 2), leg_r)
        foot = ("box", (x, y, z0 + foot_h / 2), (2.4 * leg_r, 2.4 * leg_r, foot_h / 2))
        # Level 1 groups every leg into one base instance; level 2 keeps each
        # leg (pole + foot) whole; level 3 separates poles from feet.
        parts.append((pole, ((2, 1), (2, 1 + i), (2, 1 + 2 * i))))
        weights.append(2 * math.pi * leg_r * (height - foot_h))
        parts.append((foot, ((2, 1), (2, 1 + i), (3, 2 + 2 * i))))
        weights.append(3.2 * leg_r * foot_h + 2.4 * leg_r * 2.4 * leg_r)
    return parts, weights, (2, 2, 3), (1, 2, 3)


def _build_lamp(rng, spec):
    m = spec.parts
    j = spec.jitter
    base_r = _jit(rng, 0.30, j)
    base_h = _jit(rng, 0.08, j)
    pole_r = _jit(rng, 0.04, j)
    pole_top = _jit(rng, 0.40, j)
    head_r = _jit(rng, 0.12, j)
    arm = _jit(rng, 0.30, j)
    z0 = -0.55
    parts = [
        (("cyl", (0.0, 0.0, z0), (0.0, 0.0, z0 + base_h), base_r),
         ((1, 0), (1, 0))),
        (("cyl", (0.0, 0.0, z0 + base_h), (0.0, 0.0, pole_top), pole_r),
         ((1, 0), (2, 1))),
    ]
    weights = [2 * base_r, 0.8 * (pole_top - z0)]
    for i in range(m):
        ang = 2 * math.pi * i / m + rng.uniform(-0.05, 0.05)
        center = (arm * math.cos(ang), arm * math.sin(ang), pole_top + head_r * 0.8)
        parts.append((("sphere", center, head_r), ((2, 1), (3, 2 + i))))
        weights.append(4 * head_r * head_r * 10)
    return parts, weights, (2, 3), (1, 2)


def _build_wheelset(rng, spec):
    w = spec.parts
    j = spec.jitter
    axle_len = _jit(rng, 1.4, j)
    axle_r = _jit(rng, 0.05, j)
    wheel_r = _jit(rng, 0.28, j)
    wheel_t = _jit(rng, 0.06, j)
    parts = [(
        ("cyl", (-axle_len / 2, 0.0, 0.0), (axle_len / 2, 0.0, 0.0), axle_r),
        ((1, 0), (1, 0)),
    )]
    weights = [0.8 * axle_len]
    span = 0.82 * axle_len
    for i in range(w):
        x = -span / 2 + (span * i / max(w - 1, 1) if w > 1 else span / 2)
        parts.append((
            ("cyl", (x - wheel_t / 2, 0.0, 0.0), (x + wheel_t / 2, 0.0, 0.0), wheel_r),
            ((2, 1), (2, 1 + i)),
        ))
        weights.append(2 * wheel_r * wheel_r * 6)
    return parts, weights, (2, 2), (1, 2)


_BUILDERS = {
    "n-blade-scissor": _build_scissor,
    "legged-table": _build_table,
    "multi-lamp": _build_lamp,
    "wheelset": _build_wheelset,
}


def _sample_part(rng, prim, n):
    kind = prim[0]
    if kind == "box":
        return _sample_box(rng, prim[1], prim[2], n)
    if kind == "cyl":
        return _sample_cylinder(rng, prim[1], prim[2], prim[3], n)
    if kind == "sphere":
        return _sample_sphere(rng, prim[1], prim[2], n)
    if kind == "torus":
        return _sample_torus(rng, prim[1], prim[2], prim[3], prim[4], n)
    raise ValueError(f"unknown primitive {kind!r}")


def generate_shape(spec: ShapeSpec, seed: int, k_levels: int | None = None) -> LabeledShape:
    """Deterministically generate one labeled shape.

    ``k_levels`` optionally expands the family's native levels by duplicating
    the nearest coarser level.
    """
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence(
        [_FAMILY_TAG[spec.family], spec.parts, spec.points, seed & 0xFFFFFFFF]
    ))
    parts, weights, class_counts, positions = _BUILDERS[spec.family](rng, spec)
    counts = _allocate_points(weights, spec.points)
    chunks = []
    labels = []
    for (prim, per_level), n in zip(parts, counts):
        chunks.append(_sample_part(rng, prim, int(n)))
        labels.append(np.repeat(np.asarray(per_level, dtype=np.int64)[None, :, :], n, axis=0))
    points = np.concatenate(chunks, axis=0)
    lab = np.concatenate(labels, axis=0)  # (N, n_levels, 2)
    points = quantize_coords(normalize_to_unit_sphere(points))
    levels = []
    for k in range(len(class_counts)):
        sem = np.ascontiguousarray(lab[:, k, 0])
        inst = np.ascontiguousarray(lab[:, k, 1])
        inst_off, region_off = compute_gt_offsets(points, sem, inst)
        levels.append(LevelLabels(sem, inst, inst_off, region_off))
    shape = LabeledShape(points, tuple(class_counts), levels)
    if k_levels is not None and k_levels != shape.n_levels:
        shape = duplicate_missing_levels(shape, k_levels, positions)
    return shape.validate()
