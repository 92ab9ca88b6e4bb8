"""Semantic-probability-guided nonlocal instance feature aggregation.

Per-class part features are probability-weighted means of the per-point
instance features; each point then receives a convex recombination of those
part features under its own class probabilities. The operators exist in a
single-level form and a cross-level form in which every level's features are
aggregated under every level's probabilities.

Each operator accepts either plain numpy arrays (value-only) or autodiff
:class:`~partfusion.autodiff.Node` inputs (differentiable, with optional
gradient stopping into the probability input).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .validation import check_feature_matrix, check_prob_matrix

__all__ = [
    "aggregate_part_features",
    "fuse_point_features",
    "fuse_single_level",
    "fuse_cross_level",
    "one_hot_projection",
]


def _is_node(x) -> bool:
    return isinstance(x, Node)


def aggregate_part_features(P, F):
    """Per-class part features: row m is the P[:, m]-weighted mean of F's rows.

    Matrix form (P / (1 P))^T F with the column totals clamped below at
    1e-12, so classes that receive no probability mass produce a zero row
    instead of NaN.
    """
    if _is_node(P) and _is_node(F):
        if P.value.shape[0] != F.value.shape[0]:
            raise ad.GraphError(
                f"aggregate_part_features: P has {P.value.shape[0]} rows "
                f"(node {P.id}), F has {F.value.shape[0]} (node {F.id})"
            )
        totals = ad.col_sum(P)
        totals_full = ad.repeat_rows(totals, P.value.shape[0])
        weights = ad.div(P, totals_full)
        return ad.matmul(weights, F, transpose_a=True)
    P = check_prob_matrix(P)
    F = check_feature_matrix(F)
    if P.shape[0] != F.shape[0]:
        raise ValueError(
            f"aggregate_part_features: P has {P.shape[0]} rows, F has {F.shape[0]}"
        )
    totals = np.maximum(P.sum(axis=0, keepdims=True), ad.EPS_CLAMP)
    return (P / totals).T @ F


def fuse_point_features(P, Z):
    """Per-point recombination of part features: P @ Z.

    Each output row is a convex combination of Z's rows under that point's
    class probabilities.
    """
    if _is_node(P) and _is_node(Z):
        return ad.matmul(P, Z)
    P = check_prob_matrix(P)
    Z = check_feature_matrix(Z)
    if P.shape[1] != Z.shape[0]:
        raise ValueError(
            f"fuse_point_features: P has {P.shape[1]} classes, Z has {Z.shape[0]} rows"
        )
    return P @ Z


def _prepare_prob(P, stop_grad: bool):
    return ad.stop_gradient(P) if (stop_grad and _is_node(P)) else P


def fuse_single_level(P, F_ins, positions, stop_grad: bool = True):
    """Fused per-point feature [recombined part feature, F_ins, positions].

    With ``stop_grad`` set (the default) the backward pass propagates zero
    into ``P``; forward values are unchanged either way.
    """
    if _is_node(P):
        Pf = _prepare_prob(P, stop_grad)
        Z = aggregate_part_features(Pf, F_ins)
        fused = fuse_point_features(Pf, Z)
        return ad.concat_cols([fused, F_ins, positions])
    P = check_prob_matrix(P)
    F_ins = check_feature_matrix(F_ins, P.shape[0])
    positions = check_feature_matrix(positions, P.shape[0], name="positions")
    Z = aggregate_part_features(P, F_ins)
    return np.concatenate([fuse_point_features(P, Z), F_ins, positions], axis=1)


def fuse_cross_level(Ps: Sequence, Fs: Sequence, positions, stop_grad: bool = True):
    """Cross-level fusion: level k's features aggregated under every level's
    probabilities.

    Returns one fused feature per level with columns
    [recombined(k,1), ..., recombined(k,K), F_ins(k), positions].
    """
    if len(Ps) != len(Fs):
        raise ValueError(
            f"fuse_cross_level: {len(Ps)} probability levels vs {len(Fs)} feature levels"
        )
    if not Ps:
        raise ValueError("fuse_cross_level: needs at least one level")
    if _is_node(Ps[0]):
        n = Ps[0].value.shape[0]
        for x in list(Ps) + list(Fs):
            if x.value.shape[0] != n:
                raise ad.GraphError(
                    f"fuse_cross_level: node {x.id} has {x.value.shape[0]} rows, expected {n}"
                )
        probs = [_prepare_prob(P, stop_grad) for P in Ps]
        # The per-source normalization is shared by every target level.
        weights = [
            ad.div(P, ad.repeat_rows(ad.col_sum(P), n)) for P in probs
        ]
        out = []
        for F in Fs:
            blocks = [
                fuse_point_features(P, ad.matmul(W, F, transpose_a=True))
                for P, W in zip(probs, weights)
            ]
            out.append(ad.concat_cols(blocks + [F, positions]))
        return out
    n = np.asarray(Ps[0]).shape[0]
    Ps = [check_prob_matrix(P) for P in Ps]
    Fs = [check_feature_matrix(F, n) for F in Fs]
    for P in Ps:
        if P.shape[0] != n:
            raise ValueError(
                f"fuse_cross_level: inconsistent point counts {P.shape[0]} vs {n}"
            )
    positions = check_feature_matrix(positions, n, name="positions")
    out = []
    for F in Fs:
        blocks = [fuse_point_features(P, aggregate_part_features(P, F)) for P in Ps]
        out.append(np.concatenate(blocks + [F, positions], axis=1))
    return out


def one_hot_projection(P):
    """Replace each probability row by the indicator of its argmax.

    Ties break toward the lowest class index; one-hot rows are fixed points.
    """
    if _is_node(P):
        return ad.row_onehot(P)
    P = check_prob_matrix(P)
    out = np.zeros_like(P)
    out[np.arange(P.shape[0]), P.argmax(axis=1)] = 1.0
    return out
