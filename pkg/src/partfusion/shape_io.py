"""Text formats for labeled shapes (.pls) and instance predictions (.plp).

Both are UTF-8 with LF line endings::

    PLS 1                      PLP 1
    N K                        N K
    c1 ... cK                  c1 ... cK
    x y z s1 i1 ... sK iK      x y z s1 i1 conf1 ... sK iK confK

Coordinates (and confidences) use 9 significant digits; semantic labels are
1-based, instance ids non-negative. Ground-truth offsets are not stored; they
are recomputed from points and labels on read, which is lossless because
generated coordinates are pre-quantized to the same 9 digits.
"""

from __future__ import annotations

import os

import numpy as np

from .clustering import InstancePrediction, LevelPrediction
from .shapes import LabeledShape, LevelLabels, compute_gt_offsets

_F = "{:.9g}".format


class PlsParseError(ValueError):
    """Malformed .pls/.plp content; carries the offending 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _format_shape_lines(shape: LabeledShape) -> list[str]:
    lines = ["PLS 1", f"{shape.n_points} {shape.n_levels}",
             " ".join(str(c) for c in shape.class_counts)]
    cols: list[np.ndarray] = [shape.points]
    for lv in shape.levels:
        cols.append(lv.sem[:, None])
        cols.append(lv.inst[:, None])
    for row in range(shape.n_points):
        fields = [_F(v) for v in shape.points[row]]
        for lv in shape.levels:
            fields.append(str(int(lv.sem[row])))
            fields.append(str(int(lv.inst[row])))
        lines.append(" ".join(fields))
    return lines


def write_pls(shape: LabeledShape, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(_format_shape_lines(shape)) + "\n")


def _read_lines(path) -> list[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read().splitlines()


def _parse_header(lines: list[str], magic: str) -> tuple[int, int, list[int]]:
    if not lines or lines[0].strip() != magic:
        raise PlsParseError(1, f"expected header {magic!r}")
    if len(lines) < 2:
        raise PlsParseError(2, "missing point/level counts")
    try:
        n_str, k_str = lines[1].split()
        n, k = int(n_str), int(k_str)
    except ValueError:
        raise PlsParseError(2, f"expected 'N K', got {lines[1]!r}") from None
    if n < 1 or k < 1:
        raise PlsParseError(2, "N and K must be positive")
    if len(lines) < 3:
        raise PlsParseError(3, "missing class counts")
    try:
        counts = [int(tok) for tok in lines[2].split()]
    except ValueError:
        raise PlsParseError(3, f"expected {k} class counts, got {lines[2]!r}") from None
    if len(counts) != k or any(c < 1 for c in counts):
        raise PlsParseError(3, f"expected {k} positive class counts")
    return n, k, counts


def _parse_body(lines, n, k, counts, per_level, magic):
    """Parse the point block; ``per_level`` is the field count per level."""
    width = 3 + per_level * k
    rows = []
    found = 0
    for off, raw in enumerate(lines[3:], start=4):
        if raw.strip() == "":
            if found < n:
                raise PlsParseError(off, f"blank line inside {magic} point block")
            continue
        if found >= n:
            raise PlsParseError(off, f"unexpected extra content after {n} points")
        tok = raw.split()
        if len(tok) != width:
            raise PlsParseError(off, f"expected {width} fields, got {len(tok)}")
        try:
            row = [float(t) for t in tok]
        except ValueError:
            raise PlsParseError(off, f"unparsable number in {raw!r}") from None
        for lv in range(k):
            s = row[3 + per_level * lv]
            i = row[3 + per_level * lv + 1]
            if s != int(s) or not (1 <= int(s) <= counts[lv]):
                raise PlsParseError(
                    off, f"semantic label {tok[3 + per_level * lv]} outside 1..{counts[lv]}"
                )
            if i != int(i) or i < 0:
                raise PlsParseError(
                    off, f"instance id {tok[3 + per_level * lv + 1]} must be a non-negative integer"
                )
        rows.append(row)
        found += 1
    if found < n:
        raise PlsParseError(3 + found, f"declared {n} points but found {found}")
    return np.asarray(rows, dtype=np.float64)


def read_pls(path) -> LabeledShape:
    lines = _read_lines(path)
    n, k, counts = _parse_header(lines, "PLS 1")
    body = _parse_body(lines, n, k, counts, per_level=2, magic="PLS")
    points = np.ascontiguousarray(body[:, :3])
    levels = []
    for lv in range(k):
        sem = body[:, 3 + 2 * lv].astype(np.int64)
        inst = body[:, 4 + 2 * lv].astype(np.int64)
        inst_off, region_off = compute_gt_offsets(points, sem, inst)
        levels.append(LevelLabels(sem, inst, inst_off, region_off))
    return LabeledShape(points, tuple(counts), levels).validate()


def write_plp(points: np.ndarray, prediction: InstancePrediction,
              class_counts, path) -> None:
    n = points.shape[0]
    lines = ["PLP 1", f"{n} {prediction.n_levels}",
             " ".join(str(c) for c in class_counts)]
    sems = [lv.point_sem() for lv in prediction.levels]
    confs = [lv.confidences[lv.point_inst] for lv in prediction.levels]
    for row in range(n):
        fields = [_F(v) for v in points[row]]
        for lv, sem, conf in zip(prediction.levels, sems, confs):
            fields.append(str(int(sem[row])))
            fields.append(str(int(lv.point_inst[row])))
            fields.append(_F(conf[row]))
        lines.append(" ".join(fields))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_plp(path) -> tuple[np.ndarray, tuple[int, ...], InstancePrediction]:
    lines = _read_lines(path)
    n, k, counts = _parse_header(lines, "PLP 1")
    body = _parse_body(lines, n, k, counts, per_level=3, magic="PLP")
    points = np.ascontiguousarray(body[:, :3])
    prediction = InstancePrediction()
    for lv in range(k):
        sem = body[:, 3 + 3 * lv].astype(np.int64)
        inst_raw = body[:, 4 + 3 * lv].astype(np.int64)
        conf = body[:, 5 + 3 * lv]
        ids, point_inst = np.unique(inst_raw, return_inverse=True)
        labels = np.empty(len(ids), dtype=np.int64)
        confidences = np.empty(len(ids), dtype=np.float64)
        for j in range(len(ids)):
            members = point_inst == j
            member_labels = np.unique(sem[members])
            if member_labels.size != 1:
                raise PlsParseError(
                    2, f"level {lv + 1}: instance {ids[j]} spans several labels"
                )
            labels[j] = member_labels[0]
            confidences[j] = conf[members][0]
        prediction.levels.append(LevelPrediction(point_inst, labels, confidences))
    return points, tuple(counts), prediction


def write_dataset_manifest(directory, names: list[str]) -> None:
    path = os.path.join(directory, "manifest.txt")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for name in names:
            fh.write(name + "\n")


def read_dataset_manifest(directory) -> list[str]:
    path = os.path.join(directory, "manifest.txt")
    with open(path, "r", encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip()]
