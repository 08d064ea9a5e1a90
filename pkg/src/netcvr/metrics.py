"""Evaluation metrics for CVR and NetCVR scores.

Undefined values (AUC without both classes, PRAUC without positives, a
relative improvement with a zero denominator) are reported as ``None``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

NLL_EPS = 1e-7


def auc(scores, labels) -> Optional[float]:
    """Rank-sum AUC; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_bruteforce(scores, labels) -> Optional[float]:
    """O(n^2) pairwise AUC, the oracle for ``auc``."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        return None
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (pos.size * neg.size)


def prauc(scores, labels) -> Optional[float]:
    """Area under the precision envelope, stepped over recall.

    Each distinct score is a threshold; the envelope at a threshold is the
    best precision reachable at that recall or higher.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    # keep the last position of each tie group
    last = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(steps * envelope))


def prauc_bruteforce(scores, labels) -> Optional[float]:
    """Direct threshold enumeration, the oracle for ``prauc``."""
    s = [float(v) for v in scores]
    y = [int(v) for v in labels]
    n_pos = sum(y)
    if n_pos == 0:
        return None
    points = []
    for t in sorted(set(s), reverse=True):
        tp = sum(1 for si, yi in zip(s, y) if si >= t and yi)
        k = sum(1 for si in s if si >= t)
        points.append((tp / n_pos, tp / k))
    area, prev_recall = 0.0, 0.0
    for i, (r, _) in enumerate(points):
        best = max(p for rr, p in points[i:])
        area += (r - prev_recall) * best
        prev_recall = r
    return area


def nll(scores, labels) -> float:
    p = np.clip(np.asarray(scores, dtype=np.float64), NLL_EPS, 1.0 - NLL_EPS)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def pcoc(scores, labels) -> Optional[float]:
    """Mean prediction over observed positive rate."""
    rate = float(np.mean(labels))
    if rate == 0:
        return None
    return float(np.mean(scores)) / rate


def relative_improvement(model_val, pretrained_val, oracle_val) -> Optional[float]:
    """Percent of the pretrained-to-oracle gap closed by the model."""
    if model_val is None or pretrained_val is None or oracle_val is None:
        return None
    denom = oracle_val - pretrained_val
    if denom == 0:
        return None
    return (model_val - pretrained_val) / denom * 100.0


@dataclass
class TaskMetrics:
    auc: Optional[float]
    prauc: Optional[float]
    nll: float
    pcoc: Optional[float]
    n_samples: int
    n_positives: int
    ri_auc: Optional[float] = None
    ri_prauc: Optional[float] = None

    @classmethod
    def compute(cls, scores, labels) -> "TaskMetrics":
        labels = np.asarray(labels)
        if labels.size == 0:
            return cls(None, None, math.nan, None, 0, 0)
        return cls(
            auc(scores, labels), prauc(scores, labels), nll(scores, labels), pcoc(scores, labels),
            int(labels.size), int(np.sum(labels)),
        )

    @classmethod
    def mean_of(cls, parts: list["TaskMetrics"]) -> "TaskMetrics":
        """Unweighted per-segment average; undefined segment values are skipped."""

        def avg(key):
            vals = [getattr(p, key) for p in parts if getattr(p, key) is not None and not math.isnan(getattr(p, key))]
            return float(np.mean(vals)) if vals else None

        return cls(
            avg("auc"), avg("prauc"), avg("nll"), avg("pcoc"),
            sum(p.n_samples for p in parts), sum(p.n_positives for p in parts),
        )

    def with_reference(self, pretrained: "TaskMetrics", oracle: "TaskMetrics") -> "TaskMetrics":
        out = TaskMetrics(**asdict(self))
        out.ri_auc = relative_improvement(self.auc, pretrained.auc, oracle.auc)
        out.ri_prauc = relative_improvement(self.prauc, pretrained.prauc, oracle.prauc)
        return out


@dataclass
class MetricsReport:
    cvr: TaskMetrics
    netcvr: TaskMetrics
    aggregation: str = "pooled"

    def to_dict(self) -> dict:
        return {"aggregation": self.aggregation, "cvr": asdict(self.cvr), "netcvr": asdict(self.netcvr)}

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(TaskMetrics(**data["cvr"]), TaskMetrics(**data["netcvr"]), data.get("aggregation", "pooled"))

    def with_reference(self, pretrained: "MetricsReport", oracle: "MetricsReport") -> "MetricsReport":
        return MetricsReport(
            self.cvr.with_reference(pretrained.cvr, oracle.cvr),
            self.netcvr.with_reference(pretrained.netcvr, oracle.netcvr),
            self.aggregation,
        )


@dataclass
class StreamingEvaluator:
    """Collects per-segment scores and labels as the stream is replayed."""

    segments: list = field(default_factory=list)
    p_v: list = field(default_factory=list)
    p_n: list = field(default_factory=list)
    y: list = field(default_factory=list)
    net: list = field(default_factory=list)
    _sums: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def add(self, segment: int, p_v, p_n, y, net) -> dict:
        """Record one segment; returns cumulative calibration numbers so far."""
        p_v = np.asarray(p_v, dtype=np.float64)
        p_n = np.asarray(p_n, dtype=np.float64)
        self.segments.append(np.full(p_v.size, segment, dtype=np.int64))
        self.p_v.append(p_v)
        self.p_n.append(p_n)
        self.y.append(np.asarray(y, dtype=np.int8))
        self.net.append(np.asarray(net, dtype=np.int8))
        if p_v.size:
            self._sums += [
                p_v.size, p_v.sum(), np.sum(y), p_n.sum(), np.sum(net),
                nll(p_n, net) * p_n.size,
            ]
        n, sv, sy, sn, snet, snll = self._sums
        return {
            "cum_clicks": int(n),
            "cum_pcoc_cvr": sv / sy if sy else None,
            "cum_pcoc_netcvr": sn / snet if snet else None,
            "cum_nll_netcvr": snll / n if n else None,
        }

    def arrays(self):
        cat = lambda parts, dt: np.concatenate(parts) if parts else np.zeros(0, dt)
        return (
            cat(self.segments, np.int64), cat(self.p_v, np.float64), cat(self.p_n, np.float64),
            cat(self.y, np.int8), cat(self.net, np.int8),
        )

    def report(self, aggregation: str = "pooled", min_segment: int = 0) -> MetricsReport:
        seg, p_v, p_n, y, net = self.arrays()
        keep = seg >= min_segment
        seg, p_v, p_n, y, net = seg[keep], p_v[keep], p_n[keep], y[keep], net[keep]
        if aggregation == "pooled":
            return MetricsReport(TaskMetrics.compute(p_v, y), TaskMetrics.compute(p_n, net), "pooled")
        if aggregation != "segment_mean":
            raise ValueError("aggregation must be 'pooled' or 'segment_mean'")
        cvr_parts, net_parts = [], []
        for k in np.unique(seg):
            m = seg == k
            cvr_parts.append(TaskMetrics.compute(p_v[m], y[m]))
            net_parts.append(TaskMetrics.compute(p_n[m], net[m]))
        return MetricsReport(TaskMetrics.mean_of(cvr_parts), TaskMetrics.mean_of(net_parts), "segment_mean")
