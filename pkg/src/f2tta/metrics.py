"""Stream-level metrics from prediction logs."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ParameterError


def auc_score(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-statistic AUC for the positive class 1; tied pairs count one half.

    Returns NaN when the labels hold a single class.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s), dtype=np.float64)
    # average 1-based ranks over runs of equal scores
    bounds = np.flatnonzero(np.diff(sorted_s)) + 1
    starts = np.concatenate(([0], bounds))
    ends = np.concatenate((bounds, [len(s)]))
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + b + 1)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def precision_recall(pred: Sequence[int], labels: Sequence[int]):
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    tp = int(((pred == 1) & (labels == 1)).sum())
    fp = int(((pred == 1) & (labels == 0)).sum())
    fn = int(((pred == 0) & (labels == 1)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall


def segment_bounds(n: int, n_segments: int) -> List[tuple]:
    """Contiguous near-equal chunks; the first ``n % n_segments`` chunks get one extra."""
    if n_segments < 1:
        raise ParameterError(f"n_segments must be >= 1, got {n_segments}")
    if n_segments > n:
        raise ParameterError(f"n_segments={n_segments} exceeds log length {n}")
    base, extra = divmod(n, n_segments)
    out, start = [], 0
    for i in range(n_segments):
        size = base + (1 if i < extra else 0)
        out.append((start, start + size))
        start += size
    return out


def segment_accuracy(log, n_segments: int = 8) -> List[float]:
    correct = np.array([r.pred == r.label for r in log], dtype=np.float64)
    return [100.0 * correct[a:b].mean() for a, b in segment_bounds(len(correct), n_segments)]


@dataclass
class MetricsReport:
    per_domain_accuracy: Dict[int, float]
    domain_counts: Dict[int, int]
    source_domain: int
    target_accuracy: float
    accuracy: float
    precision: float
    recall: float
    auc: float
    auc_defined: bool
    segment_accuracy: List[float] = field(default_factory=list)
    trainable_parameters: Optional[int] = None
    seeds: List[int] = field(default_factory=list)
    config_digest: Optional[str] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_domain_accuracy"] = {str(k): v for k, v in self.per_domain_accuracy.items()}
        d["domain_counts"] = {str(k): v for k, v in self.domain_counts.items()}
        if not self.auc_defined:
            d["auc"] = None
        return d

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path


def compute_metrics(log, source_domain: int = 0, n_segments: int = 8, trainable_parameters=None) -> MetricsReport:
    if not len(log):
        raise ParameterError("empty prediction log")
    labels = np.array([r.label for r in log])
    pred = np.array([r.pred for r in log])
    dom = np.array([r.domain_id for r in log])
    correct = pred == labels
    per_domain = {int(d): 100.0 * correct[dom == d].mean() for d in np.unique(dom)}
    counts = {int(d): int((dom == d).sum()) for d in np.unique(dom)}
    tgt = dom != source_domain
    precision, recall = precision_recall(pred, labels)
    auc = auc_score([r.prob_1 for r in log], labels)
    return MetricsReport(
        per_domain_accuracy=per_domain,
        domain_counts=counts,
        source_domain=source_domain,
        target_accuracy=100.0 * correct[tgt].mean() if tgt.any() else float("nan"),
        accuracy=100.0 * correct.mean(),
        precision=100.0 * precision,
        recall=100.0 * recall,
        auc=100.0 * auc if not math.isnan(auc) else float("nan"),
        auc_defined=not math.isnan(auc),
        segment_accuracy=segment_accuracy(log, min(n_segments, len(log))),
        trainable_parameters=trainable_parameters,
    )


def aggregate(reports: Sequence[MetricsReport]) -> dict:
    """Mean and sample std over runs for every scalar metric."""
    keys = ["accuracy", "target_accuracy", "precision", "recall", "auc"]
    out = {}
    for key in keys:
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        out[key] = {"mean": float(np.nanmean(vals)), "std": float(np.nanstd(vals, ddof=1)) if len(vals) > 1 else 0.0}
    domains = sorted({d for r in reports for d in r.per_domain_accuracy})
    out["per_domain_accuracy"] = {}
    for d in domains:
        vals = np.array([r.per_domain_accuracy.get(d, np.nan) for r in reports])
        out["per_domain_accuracy"][str(d)] = {"mean": float(np.nanmean(vals)), "std": float(np.nanstd(vals, ddof=1)) if len(vals) > 1 else 0.0}
    seg = np.array([r.segment_accuracy for r in reports if r.segment_accuracy])
    if seg.size:
        out["segment_accuracy"] = seg.mean(axis=0).tolist()
    out["n_runs"] = len(reports)
    return out


def format_table(rows: Dict[str, dict], source_domain: int) -> str:
    """Plain-text table: Source | per-target | Overall columns, one row per method."""
    if not rows:
        return ""
    domains = sorted(int(d) for d in next(iter(rows.values()))["per_domain_accuracy"])
    targets = [d for d in domains if d != source_domain]
    header = ["Method", f"Source(D{source_domain})"] + [f"D{d}" for d in targets] + ["Target", "Overall", "Prec", "Rec", "AUC"]
    lines = [" | ".join(header)]

    def cell(stat):
        return f"{stat['mean']:.2f}±{stat['std']:.2f}"

    for name, agg in rows.items():
        pda = agg["per_domain_accuracy"]
        vals = [name, cell(pda[str(source_domain)])] + [cell(pda[str(d)]) for d in targets]
        vals += [cell(agg[k]) for k in ("target_accuracy", "accuracy", "precision", "recall", "auc")]
        lines.append(" | ".join(vals))
    return "\n".join(lines)
