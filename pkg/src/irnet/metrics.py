"""Per-episode AUC and Macro-F1 and their aggregation across episodes."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .exceptions import ContractError


@dataclass
class EpisodeMetrics:
    auc: float | None
    macro_f1: float
    auc_skipped_classes: int = 0
    f1_excluded_classes: int = 0


@dataclass
class AggregateMetrics:
    auc_mean: float | None
    auc_std: float | None
    macro_f1_mean: float
    macro_f1_std: float
    episodes: int
    auc_undefined_episodes: int = 0


def _binary_auc(scores: np.ndarray, truth: np.ndarray) -> float:
    # Mann-Whitney statistic; average ranks give ties half credit
    ranks = rankdata(scores)
    n_pos = int(truth.sum())
    n_neg = len(truth) - n_pos
    return float((ranks[truth].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc_macro(scores, truth) -> tuple[float | None, int]:
    """Macro one-vs-rest AUC over classes with both positive and negative queries.

    Returns ``(auc, skipped)``; ``auc`` is None when every class is skipped.
    """
    p = np.asarray(scores, dtype=np.float64)
    y = np.asarray(truth).astype(bool)
    if p.ndim != 2 or p.shape != y.shape or p.shape[0] == 0:
        raise ContractError(f"scores {p.shape} and truth {y.shape} must be matching nonempty matrices")
    per_class, skipped = [], 0
    for k in range(p.shape[1]):
        col = y[:, k]
        if col.all() or not col.any():
            skipped += 1
            continue
        per_class.append(_binary_auc(p[:, k], col))
    return (float(np.mean(per_class)) if per_class else None), skipped


def macro_f1(preds, truth) -> tuple[float, int]:
    """Unweighted mean per-class F1; classes absent from both are excluded.

    Returns ``(f1, excluded)``.  An episode where every class is excluded
    scores 1.0 (nothing to get wrong).
    """
    yhat = np.asarray(preds).astype(bool)
    y = np.asarray(truth).astype(bool)
    if yhat.shape != y.shape or yhat.ndim != 2:
        raise ContractError(f"predictions {yhat.shape} and truth {y.shape} must match")
    scores, excluded = [], 0
    for k in range(y.shape[1]):
        tp = int(np.sum(yhat[:, k] & y[:, k]))
        fp = int(np.sum(yhat[:, k] & ~y[:, k]))
        fn = int(np.sum(~yhat[:, k] & y[:, k]))
        if tp + fp + fn == 0:
            excluded += 1
            continue
        scores.append(2.0 * tp / (2 * tp + fp + fn))
    return (float(np.mean(scores)) if scores else 1.0), excluded


def episode_metrics(scores, preds, truth) -> EpisodeMetrics:
    auc, skipped = roc_auc_macro(scores, truth)
    f1, excluded = macro_f1(preds, truth)
    return EpisodeMetrics(auc, f1, skipped, excluded)


def aggregate(per_episode: Sequence[EpisodeMetrics]) -> AggregateMetrics:
    if not per_episode:
        raise ContractError("cannot aggregate zero episodes")
    f1 = np.array([m.macro_f1 for m in per_episode])
    aucs = np.array([m.auc for m in per_episode if m.auc is not None])
    return AggregateMetrics(
        auc_mean=float(aucs.mean()) if aucs.size else None,
        auc_std=float(aucs.std()) if aucs.size else None,
        macro_f1_mean=float(f1.mean()),
        macro_f1_std=float(f1.std()),
        episodes=len(per_episode),
        auc_undefined_episodes=len(per_episode) - int(aucs.size),
    )


def write_metrics_jsonl(path, per_episode: Sequence[EpisodeMetrics], summary: AggregateMetrics) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, m in enumerate(per_episode):
            fh.write(json.dumps({"type": "episode", "episode": i, **asdict(m)}) + "\n")
        fh.write(json.dumps({"type": "aggregate", **asdict(summary)}) + "\n")


def write_summary_csv(path, rows: Sequence[dict]) -> None:
    """One row per evaluated split/setting, columns from the first row."""
    if not rows:
        raise ContractError("no summary rows to write")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else v)
                             for k, v in row.items()})
