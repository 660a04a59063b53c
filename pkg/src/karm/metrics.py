"""Detection metrics over per-model trojan scores."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SCORE_CLAMP = 1e-6


def roc_auc(scores, labels) -> float:
    """Probability a trojaned score beats a clean one, ties counting one half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    pos, neg = s[y], s[~y]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("roc_auc needs at least one positive and one negative")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def cross_entropy(scores, labels, clamp: float = SCORE_CLAMP) -> float:
    s = np.clip(np.asarray(scores, dtype=float), clamp, 1 - clamp)
    y = np.asarray(labels, dtype=float)
    return float(np.mean(-(y * np.log(s) + (1 - y) * np.log(1 - s))))


@dataclass
class DetectionMetrics:
    accuracy: float
    roc_auc: float
    cross_entropy: float
    rows: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "roc_auc": self.roc_auc,
                "cross_entropy": self.cross_entropy, "models": self.rows}


def compute_metrics(reports: dict, truth: dict) -> DetectionMetrics:
    """``reports``: model_id -> report dict; ``truth``: model_id -> is_trojaned."""
    unmatched = sorted(set(reports) - set(truth))
    if unmatched:
        raise KeyError(f"reports without ground truth: {unmatched}")
    ids = sorted(reports)
    y = np.array([bool(truth[i]) for i in ids])
    scores = np.array([float(reports[i]["trojan_score"]) for i in ids])
    verdicts = np.array([reports[i]["verdict"] == "Trojaned" for i in ids])
    rows = [{"model_id": i, "ground_truth": bool(truth[i]), "trojan_score": float(reports[i]["trojan_score"]),
             "verdict": reports[i]["verdict"], "scan_time": reports[i].get("wall_time")} for i in ids]
    auc = roc_auc(scores, y) if y.any() and (~y).any() else float("nan")
    return DetectionMetrics(float((verdicts == y).mean()), auc, cross_entropy(scores, y), rows)
