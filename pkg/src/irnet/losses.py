"""Relation targets, dual relation losses, edge-voting scores and predictions."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ContractError

TARGET_MODES = ("exact", "overlap")
VOTE_MODES = ("all-labels", "sampled-class")


@dataclass
class RelationTargets:
    """Binary same-class matrix anchored at support rows.

    ``valid[i, j]`` is true where ``i`` is a support node and ``j != i``;
    ``targets`` is meaningful only there.
    """

    targets: np.ndarray
    valid: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.valid & (self.targets == 1)

    @property
    def negative(self) -> np.ndarray:
        return self.valid & (self.targets == 0)


@dataclass
class LossBreakdown:
    support: Tensor
    query: Tensor
    total: Tensor
    alpha: float
    beta: float

    def as_floats(self) -> dict[str, float]:
        return {"loss": self.total.item(), "support_loss": self.support.item(),
                "query_loss": self.query.item()}


def _as_label_matrix(labels, name: str) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ContractError(f"{name} must be a 2-D binary matrix, got shape {arr.shape}")
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ContractError(f"{name} must be binary")
    return arr.astype(np.int8)


def relation_targets(support_labels, query_labels, mode: str = "exact") -> RelationTargets:
    """Same-class indicators ``y_ij`` for support anchors ``i`` and all ``j != i``.

    ``exact`` compares label sets for equality; ``overlap`` asks whether they
    share any class.  Nodes are ordered support first, then queries.
    """
    if mode not in TARGET_MODES:
        raise ContractError(f"unknown relation-target mode {mode!r}; expected one of {TARGET_MODES}")
    if query_labels is None:
        raise ContractError("query labels are required to build relation targets")
    ys = _as_label_matrix(support_labels, "support labels")
    yq = _as_label_matrix(query_labels, "query labels")
    if ys.shape[1] != yq.shape[1]:
        raise ContractError("support and query label matrices disagree on the class count")
    y = np.concatenate([ys, yq], axis=0).astype(bool)
    n_s, m = len(ys), len(y)
    if mode == "exact":
        same = (y[:, None, :] == y[None, :, :]).all(axis=2)
    else:
        same = (y[:, None, :] & y[None, :, :]).any(axis=2)
    valid = np.zeros((m, m), dtype=bool)
    valid[:n_s] = True
    np.fill_diagonal(valid, False)
    return RelationTargets(np.where(valid, same, 0).astype(np.int8), valid)


def support_loss(edge_layers: Sequence[Tensor], targets: RelationTargets,
                 support_mask: np.ndarray) -> Tensor:
    """Pairwise log-sum-exp loss around zero for every support anchor, summed over layers."""
    n_support = int(np.sum(support_mask))
    if n_support == 0:
        raise ContractError("support loss needs at least one support node")
    pos, neg = targets.positive, targets.negative
    total = None
    for E in edge_layers:
        if E.shape != pos.shape:
            raise ContractError(f"edge layer {E.shape} does not match targets {pos.shape}")
        per_anchor = ad.log1p_sum_exp(E, neg, axis=1) + ad.log1p_sum_exp(-E, pos, axis=1)
        layer_loss = ad.scale(ad.sum(per_anchor), 1.0 / n_support)
        total = layer_loss if total is None else total + layer_loss
    return total


def vote_matrix(support_labels, sampled_classes=None, vote_mode: str = "all-labels") -> np.ndarray:
    """Which classes each support node votes for."""
    ys = _as_label_matrix(support_labels, "support labels")
    if vote_mode == "all-labels":
        return ys.astype(np.float64)
    if vote_mode == "sampled-class":
        if sampled_classes is None:
            raise ContractError("sampled-class voting needs the sampled class of each support")
        idx = np.asarray(sampled_classes, dtype=np.int64)
        if idx.shape != (len(ys),) or idx.min(initial=0) < 0 or idx.max(initial=0) >= ys.shape[1]:
            raise ContractError("sampled class index out of range")
        votes = np.zeros(ys.shape, dtype=np.float64)
        votes[np.arange(len(ys)), idx] = 1.0
        return votes
    raise ContractError(f"unknown vote mode {vote_mode!r}; expected one of {VOTE_MODES}")


def class_scores(final_edges: Tensor, votes: np.ndarray, support_mask: np.ndarray) -> Tensor:
    """``p[i, k] = sum_j E[j, i] * votes[j, k]`` over support ``j``, for each query ``i``.

    Uses the directed support-to-query edges of the last layer.
    """
    support_mask = np.asarray(support_mask, dtype=bool)
    n_s = int(support_mask.sum())
    m = len(support_mask)
    if not support_mask[:n_s].all():
        raise ContractError("support nodes must precede query nodes")
    votes = np.asarray(votes, dtype=np.float64)
    if votes.shape[0] != n_s:
        raise ContractError(f"{votes.shape[0]} vote rows for {n_s} support nodes")
    if final_edges.shape != (m, m):
        raise ContractError(f"final edges {final_edges.shape} for {m} nodes")
    full_votes = np.zeros((m, votes.shape[1]))
    full_votes[:n_s] = votes
    pick_queries = np.eye(m)[n_s:]
    return pick_queries @ (final_edges.T @ full_votes)


def query_loss(scores: Tensor, query_labels) -> Tensor:
    """Mean over queries of the log-sum-exp separation of relevant and irrelevant classes."""
    yq = _as_label_matrix(query_labels, "query labels")
    if yq.shape != scores.shape:
        raise ContractError(f"query labels {yq.shape} vs scores {scores.shape}")
    if yq.shape[0] == 0:
        raise ContractError("query loss needs at least one query")
    if not yq.any(axis=1).all():
        raise ContractError("every query needs at least one label")
    pos = yq.astype(bool)
    per_query = ad.log1p_sum_exp(scores, ~pos, axis=1) + ad.log1p_sum_exp(-scores, pos, axis=1)
    return ad.mean(per_query)


def total_loss(support: Tensor, query: Tensor, alpha: float = 0.1, beta: float = 1.0) -> LossBreakdown:
    if alpha < 0 or beta < 0:
        raise ContractError(f"loss weights must be nonnegative (alpha={alpha}, beta={beta})")
    total = ad.scale(support, alpha) + ad.scale(query, beta)
    return LossBreakdown(support, query, total, float(alpha), float(beta))


def predict(scores, force_top1: bool = False) -> np.ndarray:
    """Positive score means predicted; zero and negative mean not predicted."""
    p = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    pred = (p > 0).astype(np.int8)
    if force_top1 and pred.size:
        empty = ~pred.any(axis=1)
        pred[np.flatnonzero(empty), np.argmax(p[empty], axis=1)] = 1
    return pred
