"""Segmentation quality and uncertainty-ranking metrics.

Selective prediction treats the per-image uncertainty score u as a
confidence ordering (low u first). Failure detection treats u as a score
for flagging images whose Dice falls below a threshold. All orderings
break ties on u by image_id so results are deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EvalRecord:
    image_id: str
    dice: float
    u: float


# ---------------------------------------------------------------------------
# mask overlap
# ---------------------------------------------------------------------------

def _check_shapes(m: np.ndarray, g: np.ndarray) -> None:
    if m.shape != g.shape:
        raise ValueError(f"mask shapes differ: {m.shape} vs {g.shape}")


def dice(m: np.ndarray, g: np.ndarray) -> float:
    """2|m n g| / (|m| + |g|); both empty counts as perfect agreement."""
    _check_shapes(m, g)
    m, g = m.astype(bool), g.astype(bool)
    denom = int(m.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((m & g).sum()) / denom


def iou(m: np.ndarray, g: np.ndarray) -> float:
    """|m n g| / |m u g|; empty union counts as perfect agreement."""
    _check_shapes(m, g)
    m, g = m.astype(bool), g.astype(bool)
    union = int((m | g).sum())
    if union == 0:
        return 1.0
    return int((m & g).sum()) / union


def pixel_accuracy(m: np.ndarray, g: np.ndarray) -> float:
    _check_shapes(m, g)
    return float((m.astype(bool) == g.astype(bool)).mean())


# ---------------------------------------------------------------------------
# selective prediction
# ---------------------------------------------------------------------------

def _by_confidence(records: list[EvalRecord]) -> list[EvalRecord]:
    return sorted(records, key=lambda r: (r.u, r.image_id))


def delta_dice_at(records: list[EvalRecord], coverage: float = 0.9) -> float:
    """Percentage-point Dice change when keeping the most confident fraction.

    Retains ceil(coverage * N) records of lowest u.
    """
    if len(records) < 2:
        raise ValueError(f"need at least 2 records, got {len(records)}")
    if not 0 < coverage <= 1:
        raise ValueError(f"coverage must be in (0, 1], got {coverage}")
    ordered = _by_confidence(records)
    k = math.ceil(coverage * len(ordered))
    kept = float(np.mean([r.dice for r in ordered[:k]]))
    overall = float(np.mean([r.dice for r in ordered]))
    return 100.0 * (kept - overall)


def risk_coverage_curve(records: list[EvalRecord]) -> list[tuple[float, float]]:
    """(coverage k/N, mean risk of the k most confident) for k = 1..N."""
    if not records:
        raise ValueError("no records")
    ordered = _by_confidence(records)
    n = len(ordered)
    curve = []
    risk_sum = 0.0
    for k, rec in enumerate(ordered, start=1):
        risk_sum += 1.0 - rec.dice
        curve.append((k / n, risk_sum / k))
    return curve


def aurc(records: list[EvalRecord]) -> float:
    """Mean of the prefix risks over the coverage grid {1/N, ..., 1}."""
    curve = risk_coverage_curve(records)
    return float(np.mean([risk for _, risk in curve]))


# ---------------------------------------------------------------------------
# failure detection
# ---------------------------------------------------------------------------

def failure_labels(records: list[EvalRecord], dice_threshold: float = 0.8) -> np.ndarray:
    return np.array([r.dice < dice_threshold for r in records], dtype=bool)


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties mapped to their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(records: list[EvalRecord], dice_threshold: float = 0.8) -> float | None:
    """Mann-Whitney AUROC of u as a failure score; midranks for tied u.

    Returns None when the labeling is degenerate (all failures or none).
    """
    labels = failure_labels(records, dice_threshold)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _midranks(np.array([r.u for r in records], dtype=np.float64))
    rank_sum = float(ranks[labels].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auprc(records: list[EvalRecord], dice_threshold: float = 0.8) -> float | None:
    """Average precision of u as a failure score (step integral, no
    interpolation). Ties in u are broken by image_id; None if no failures."""
    labels = failure_labels(records, dice_threshold)
    n_pos = int(labels.sum())
    if n_pos == 0:
        return None
    order = sorted(range(len(records)), key=lambda i: (-records[i].u, records[i].image_id))
    ap = 0.0
    hits = 0
    for rank, idx in enumerate(order, start=1):
        if labels[idx]:
            hits += 1
            ap += (hits / rank) / n_pos
    return ap
