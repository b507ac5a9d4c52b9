"""Offline evaluation metrics: AUC, (weighted) recall@K, NDCG, list AUC, Pearson."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import UndefinedMetricError

# item gains used by NDCG: order > add-to-cart > click > nothing
GAIN_ORDER, GAIN_ATC, GAIN_CLICK = 1.0, 0.25, 0.1

WR_VARIANTS = {
    "identity": lambda w: w,
    "log": np.log1p,
    "sqrt": np.sqrt,
    "square": np.square,
}


def auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative; ties count 0.5.

    Rank-sum formulation with average ranks for ties, O(n log n).
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    # average 1-based rank over each tie block
    starts = np.r_[0, np.flatnonzero(np.diff(ss)) + 1]
    ends = np.r_[starts[1:], len(ss)]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(len(s))
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class RankedList:
    """Items of one query/request. ``order`` etc. are per-item flags; ``W`` the order counts."""

    scores: np.ndarray
    W: np.ndarray = None
    order: np.ndarray = None
    atc: np.ndarray = None
    click: np.ndarray = None
    list_id: object = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        n = len(self.scores)
        if n == 0:
            raise ValueError("a ranked list cannot be empty")
        for name in ("W", "order", "atc", "click"):
            v = getattr(self, name)
            setattr(self, name, np.zeros(n) if v is None else np.asarray(v, dtype=float))
        if self.W is not None and (self.W < 0).any():
            raise ValueError("order counts W must be non-negative")

    def __len__(self):
        return len(self.scores)

    def ranking(self) -> np.ndarray:
        """Indices by score descending; ties keep original order."""
        return np.argsort(-self.scores, kind="stable")

    def gains(self) -> np.ndarray:
        g = np.where(self.order > 0, GAIN_ORDER, np.where(self.atc > 0, GAIN_ATC,
                     np.where(self.click > 0, GAIN_CLICK, 0.0)))
        return g


def weighted_recall_at_k(lst: RankedList, k: int, variant: str = "identity") -> float:
    """Share of transformed order-count mass landing in the top ``k`` positions."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    tw = WR_VARIANTS[variant](lst.W)
    denom = tw.sum()
    if denom <= 0:
        raise UndefinedMetricError("WR@K undefined: total weight is zero")
    return float(tw[lst.ranking()[:k]].sum() / denom)


def recall_at_k(lst: RankedList, k: int, label: str = "order") -> float:
    pos = getattr(lst, label) > 0
    n = int(pos.sum())
    if n == 0:
        raise UndefinedMetricError(f"Recall@K undefined: no positive {label!r} items")
    return float(pos[lst.ranking()[:k]].sum() / n)


def _dcg(gains: np.ndarray) -> float:
    disc = np.log2(np.arange(2, len(gains) + 2))
    return float(((2.0 ** gains - 1.0) / disc).sum())


def ndcg(lst: RankedList) -> float:
    g = lst.gains()
    idcg = _dcg(np.sort(g)[::-1])
    if idcg <= 0:
        raise UndefinedMetricError("NDCG undefined: no item has positive gain")
    return _dcg(g[lst.ranking()]) / idcg


def _list_auc_one(lst: RankedList) -> float:
    """Share of (ordered, non-ordered) pairs where the ordered item is ranked first."""
    pos = (lst.order > 0)[lst.ranking()]
    # each negative is outranked by the positives placed before it
    pos_before = np.cumsum(pos)
    return float(pos_before[~pos].sum() / (pos.sum() * (~pos).sum()))


def list_auc(lists) -> float:
    """Unweighted mean of per-list AUC over lists holding both ordered and non-ordered items."""
    vals = [
        _list_auc_one(lst) for lst in lists
        if len(lst) > 1 and 0 < (lst.order > 0).sum() < len(lst)
    ]
    if not vals:
        raise UndefinedMetricError("List AUC undefined: no list has both ordered and non-ordered items")
    return float(np.mean(vals))


@dataclass
class UpliftSeries:
    offline: np.ndarray
    online: np.ndarray

    def __post_init__(self):
        self.offline = np.asarray(self.offline, dtype=float)
        self.online = np.asarray(self.online, dtype=float)
        if len(self.offline) != len(self.online) or len(self.offline) < 2:
            raise ValueError("uplift series must be paired with length >= 2")


def pearson(series: UpliftSeries) -> tuple[float, float]:
    """Sample Pearson r with a two-sided t-test p-value (n-2 dof); p is NaN for n < 3."""
    x = series.offline - series.offline.mean()
    y = series.online - series.online.mean()
    sx, sy = np.sqrt((x * x).sum()), np.sqrt((y * y).sum())
    if sx == 0 or sy == 0:
        raise UndefinedMetricError("Pearson r undefined for a constant series")
    r = float(np.clip((x * y).sum() / (sx * sy), -1.0, 1.0))
    n = len(x)
    if n < 3:
        return r, float("nan")
    if abs(r) == 1.0:
        return r, 0.0
    t = r * np.sqrt((n - 2) / (1.0 - r * r))
    return r, float(2.0 * stats.t.sf(abs(t), n - 2))


def group_lists(list_ids, scores, W=None, order=None, atc=None, click=None) -> list[RankedList]:
    """Split flat per-item arrays into RankedLists, in first-appearance order of list ids."""
    list_ids = np.asarray(list_ids)
    _, first, inv = np.unique(list_ids, return_index=True, return_inverse=True)
    out = []
    for g in np.argsort(first, kind="stable"):
        idx = np.flatnonzero(inv == g)
        pick = (lambda a: None if a is None else np.asarray(a)[idx])
        out.append(RankedList(np.asarray(scores)[idx], pick(W), pick(order), pick(atc), pick(click),
                              list_id=list_ids[idx[0]].item() if hasattr(list_ids[idx[0]], "item") else list_ids[idx[0]]))
    return out


def list_metrics(lists, ks=(10, 50, 100)) -> dict:
    """WR@K (all variants), Recall@K, NDCG and List AUC averaged over qualifying lists."""
    report = {}
    for k in ks:
        for variant in WR_VARIANTS:
            vals = [weighted_recall_at_k(l, k, variant) for l in lists if WR_VARIANTS[variant](l.W).sum() > 0]
            if vals:
                suffix = "" if variant == "identity" else f"_{variant}"
                report[f"WR@{k}{suffix}"] = float(np.mean(vals))
        vals = [recall_at_k(l, k) for l in lists if (l.order > 0).any()]
        if vals:
            report[f"Recall@{k}"] = float(np.mean(vals))
    vals = [ndcg(l) for l in lists if (l.gains() > 0).any()]
    if vals:
        report["NDCG"] = float(np.mean(vals))
    try:
        report["ListAUC"] = list_auc(lists)
    except UndefinedMetricError:
        pass
    return report


@dataclass
class MetricReport:
    task_auc: dict = field(default_factory=dict)
    task_mse: dict = field(default_factory=dict)
    list_metrics: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {}
        for task, v in self.task_auc.items():
            out[f"auc/{task}"] = v
        for task, v in self.task_mse.items():
            out[f"mse/{task}"] = v
        for name, v in self.list_metrics.items():
            out[f"list/{name}"] = v
        out.update(self.extra)
        return out

    def dumps(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "MetricReport":
        flat = json.loads(text)
        rep = cls()
        for key, v in flat.items():
            kind, _, name = key.partition("/")
            if kind == "auc":
                rep.task_auc[name] = v
            elif kind == "mse":
                rep.task_mse[name] = v
            elif kind == "list":
                rep.list_metrics[name] = v
            else:
                rep.extra[key] = v
        return rep
