"""Ranking and funnel metrics.

All ranking metrics depend on scores only through their order, with ties
broken by ascending talent id (or by position when ids are absent).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


class UndefinedMetric(ValueError):
    """Metric is not defined for this input (e.g. a single label class)."""


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random positive outscores a random negative; ties count 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs both positive and negative labels")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def rank_order(scores: Sequence[float], ids: Sequence | None = None) -> np.ndarray:
    """Indices sorted by descending score, ties by ascending id."""
    s = np.asarray(scores, dtype=np.float64)
    if ids is None:
        keys = np.arange(s.size)
    else:
        keys = np.asarray(ids)
    # lexsort uses the last key as primary
    return np.lexsort((keys, -s))


def average_precision(scores: Sequence[float], labels: Sequence[int], ids: Sequence | None = None) -> float:
    y = np.asarray(labels).astype(np.int64)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetric("AP needs at least one positive")
    ranked = y[rank_order(scores, ids)]
    hits = np.cumsum(ranked)
    at = np.flatnonzero(ranked)
    precisions = hits[at] / (at + 1.0)
    return math.fsum(precisions.tolist()) / n_pos


@dataclass
class SessionGroup:
    session_id: str
    scores: np.ndarray
    labels: np.ndarray
    talent_ids: list[str]

    def ranked_labels(self) -> np.ndarray:
        return self.labels[rank_order(self.scores, self.talent_ids)]


def group_sessions(
    session_ids: Sequence[str], scores: Sequence[float], labels: Sequence[int], talent_ids: Sequence[str]
) -> list[SessionGroup]:
    buckets: dict[str, list[int]] = {}
    for i, sid in enumerate(session_ids):
        buckets.setdefault(sid, []).append(i)
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    return [
        SessionGroup(sid, s[idx], y[idx], [talent_ids[i] for i in idx])
        for sid, idx in sorted(buckets.items())
    ]


def mrr_at_10(groups: Sequence[SessionGroup], k: int = 10) -> tuple[float, int]:
    """Mean reciprocal rank of the first positive in the top ``k``.

    Groups without positives are skipped; returns (mrr, n_skipped).
    """
    rr = []
    skipped = 0
    for g in groups:
        ranked = g.ranked_labels()
        if not ranked.any():
            skipped += 1
            continue
        first = int(np.argmax(ranked))
        rr.append(1.0 / (first + 1) if first < k else 0.0)
    if not rr:
        raise UndefinedMetric("no session has a positive label")
    return math.fsum(rr) / len(rr), skipped


@dataclass
class FunnelRates:
    ctr_rate: float
    cvr_rate: float | None
    ctcvr_rate: float
    impressions: int
    clicks: int
    applications: int


def funnel_rates(click: Sequence[int], apply: Sequence[int]) -> FunnelRates:
    c = np.asarray(click, dtype=np.int64)
    a = np.asarray(apply, dtype=np.int64)
    n = c.size
    if n == 0:
        raise UndefinedMetric("funnel rates need at least one impression")
    clicks, apps = int(c.sum()), int(a.sum())
    if apps > clicks or np.any(a > c):
        raise ValueError("funnel violation: applications exceed clicks")
    return FunnelRates(clicks / n, apps / clicks if clicks else None, apps / n, n, clicks, apps)


TASK_COLUMNS = ("auc", "mrr_at_10", "ap")


@dataclass
class EvalReport:
    tasks: dict[str, dict[str, float | None]] = field(default_factory=dict)
    funnel: FunnelRates | None = None
    excluded_sessions: dict[str, int] = field(default_factory=dict)

    def flat(self) -> dict[str, float | int | None]:
        out: dict[str, float | int | None] = {}
        for task in ("ctr", "cvr"):
            for col in TASK_COLUMNS:
                out[f"{task}_{col}"] = self.tasks.get(task, {}).get(col)
        f = self.funnel
        out.update(
            ctr_rate=f.ctr_rate, cvr_rate=f.cvr_rate, ctcvr_rate=f.ctcvr_rate,
            impressions=f.impressions, clicks=f.clicks, applications=f.applications,
        )
        return out

    def missing(self) -> list[str]:
        return [k for k, v in self.flat().items() if v is None]

    def to_csv(self) -> str:
        buf = io.StringIO()
        flat = self.flat()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(flat.keys())
        w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in flat.values()])
        return buf.getvalue()

    def pretty(self) -> str:
        lines = [f"{'task':<6}{'AUC':>10}{'MRR@10':>10}{'AP':>10}"]
        fmt = lambda v: f"{v:>10.4f}" if v is not None else f"{'-':>10}"
        for task in ("ctr", "cvr"):
            m = self.tasks.get(task, {})
            lines.append(f"{task:<6}" + "".join(fmt(m.get(c)) for c in TASK_COLUMNS))
        f = self.funnel
        lines.append(
            f"CTR {f.ctr_rate:.4f}  CVR {('-' if f.cvr_rate is None else f'{f.cvr_rate:.4f}')}  "
            f"CTCVR {f.ctcvr_rate:.4f}  ({f.impressions} impressions, {f.clicks} clicks, {f.applications} applications)"
        )
        return "\n".join(lines)


def _safe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetric:
        return None


def evaluate(
    session_ids: Sequence[str],
    talent_ids: Sequence[str],
    p_ctr: Sequence[float],
    p_cvr: Sequence[float],
    click: Sequence[int],
    apply: Sequence[int],
) -> EvalReport:
    """CTR metrics over all impressions, CVR metrics over clicked impressions."""
    click = np.asarray(click, dtype=np.int64)
    apply = np.asarray(apply, dtype=np.int64)
    p_ctr = np.asarray(p_ctr, dtype=np.float64)
    p_cvr = np.asarray(p_cvr, dtype=np.float64)
    report = EvalReport(funnel=funnel_rates(click, apply))
    clicked = np.flatnonzero(click == 1)
    pools = {
        "ctr": (np.arange(click.size), p_ctr, click),
        "cvr": (clicked, p_cvr[clicked], apply[clicked]),
    }
    for task, (idx, scores, labels) in pools.items():
        sids = [session_ids[i] for i in idx]
        tids = [talent_ids[i] for i in idx]
        metrics: dict[str, float | None] = {
            "auc": _safe(auc, scores, labels),
            "ap": _safe(average_precision, scores, labels, tids),
        }
        mrr = _safe(mrr_at_10, group_sessions(sids, scores, labels, tids))
        metrics["mrr_at_10"], report.excluded_sessions[task] = mrr if mrr else (None, 0)
        report.tasks[task] = metrics
    return report
