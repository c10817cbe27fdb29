"""Ranking, diversity and repetition metrics under the REL1/REL10 relevance definitions."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .corpus import PlaycountMatrix, SplitPlan

RANKING_METRICS = (
    "P1@10",
    "P10@10",
    "MAP1@500",
    "MAP10@500",
    "R1@10",
    "R10@10",
    "R1@500",
    "R10@500",
    "Rank1",
    "Rank10",
    "nDCG@500",
    "nDCG@10",
)
ALL_METRICS = RANKING_METRICS + ("DIV", "REP")
LOWER_IS_BETTER = frozenset({"Rank1", "Rank10", "REP"})
DIV_K = 500

# metric id -> (family, relevance threshold, cutoff)
_METRIC_DEFS = {
    "P1@10": ("P", 1, 10),
    "P10@10": ("P", 10, 10),
    "MAP1@500": ("MAP", 1, 500),
    "MAP10@500": ("MAP", 10, 500),
    "R1@10": ("R", 1, 10),
    "R10@10": ("R", 10, 10),
    "R1@500": ("R", 1, 500),
    "R10@500": ("R", 10, 500),
    "Rank1": ("Rank", 1, None),
    "Rank10": ("Rank", 10, None),
    "nDCG@500": ("nDCG", None, 500),
    "nDCG@10": ("nDCG", None, 10),
}


def higher_is_better(metric: str) -> bool:
    return metric not in LOWER_IS_BETTER


def _items(ranked) -> np.ndarray:
    return np.asarray(getattr(ranked, "items", ranked), dtype=np.int64)


def _relevant(rel) -> np.ndarray:
    return np.fromiter(rel, dtype=np.int64) if not isinstance(rel, np.ndarray) else rel.astype(np.int64)


def precision_at_k(ranked, relevant, k: int) -> float:
    """Hits in the top k divided by k; a short list counts its shortfall as misses."""
    if k < 1:
        raise ValueError("k must be >= 1")
    top = _items(ranked)[:k]
    return float(np.isin(top, _relevant(relevant)).sum()) / k


def recall_at_k(ranked, relevant, k: int) -> float:
    rel = _relevant(relevant)
    if len(rel) == 0:
        raise ValueError("recall undefined without relevant items")
    return float(np.isin(_items(ranked)[:k], rel).sum()) / len(rel)


def average_precision_at_k(ranked, relevant, k: int = 500) -> float:
    """Sum of P@r over relevant ranks r <= k, normalised by min(|relevant|, k)."""
    rel = _relevant(relevant)
    if len(rel) == 0:
        raise ValueError("average precision undefined without relevant items")
    hits = np.flatnonzero(np.isin(_items(ranked)[:k], rel))
    if len(hits) == 0:
        return 0.0
    return float(np.sum(np.arange(1, len(hits) + 1) / (hits + 1.0))) / min(len(rel), k)


def percentile_rank(full_list, relevant, weights: Mapping[int, float] | None = None) -> float:
    """Mean of (position-1)/(N-1) over relevant items present in the list; lower is better.

    With ``weights`` (item -> playcount) the mean is playcount-weighted.
    """
    items = _items(full_list)
    rel = _relevant(relevant)
    pos = np.flatnonzero(np.isin(items, rel))
    if len(pos) == 0:
        raise ValueError("no relevant item among the ranked candidates")
    n = len(items)
    pct = pos / (n - 1) if n > 1 else np.zeros(len(pos))
    if weights is None:
        return float(pct.mean())
    wt = np.array([weights[i] for i in items[pos].tolist()], dtype=np.float64)
    return float(np.sum(wt * pct) / np.sum(wt))


def _discount(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2))


def ndcg_at_k(ranked, graded: Mapping[int, float], k: int) -> float:
    """DCG@k / IDCG@k with raw hidden playcounts as gains."""
    gains_ideal = np.sort(np.array([g for g in graded.values() if g > 0], dtype=np.float64))[::-1]
    if len(gains_ideal) == 0:
        raise ValueError("nDCG undefined without positive gains")
    top = _items(ranked)[:k].tolist()
    gains = np.array([graded.get(i, 0.0) for i in top], dtype=np.float64)
    dcg = float(np.sum(gains * _discount(len(gains))))
    ideal = gains_ideal[:k]
    return dcg / float(np.sum(ideal * _discount(len(ideal))))


def diversity(lists: Iterable, catalog_size: int, k: int = DIV_K) -> float:
    """Percentage of the catalog appearing in at least one top-k list."""
    seen: set[int] = set()
    for rl in lists:
        seen.update(_items(rl)[:k].tolist())
    return 100.0 * len(seen) / catalog_size


def repetition(lists: Iterable, k: int = DIV_K) -> float:
    """Average number of users reached per recommended item."""
    reach: dict[int, int] = {}
    for rl in lists:
        for i in _items(rl)[:k].tolist():
            reach[i] = reach.get(i, 0) + 1
    if not reach:
        return 0.0
    return sum(reach.values()) / len(reach)


def user_metrics(full_list, hidden_items: np.ndarray, hidden_counts: np.ndarray,
                 metrics: Iterable[str] = RANKING_METRICS, weighted_rank: bool = False) -> dict[str, float]:
    """All requested ranking metrics for one user; metrics without a defined value are omitted.

    Positions of every hidden item are looked up once; this is the fast path
    used by ``evaluate_lists`` and agrees with the single-metric functions.
    """
    items = _items(full_list)
    n = len(items)
    hidden_items = np.asarray(hidden_items, dtype=np.int64)
    hidden_counts = np.asarray(hidden_counts, dtype=np.float64)
    lookup = dict(zip(items.tolist(), range(n)))
    pos = np.array([lookup.get(i, -1) for i in hidden_items.tolist()], dtype=np.int64)
    present = pos >= 0
    out: dict[str, float] = {}
    for metric in metrics:
        family, threshold, k = _METRIC_DEFS[metric]
        if family == "nDCG":
            pos_gain = hidden_counts > 0
            if not pos_gain.any():
                continue
            hit = present & (pos < k) & pos_gain
            dcg = float(np.sum(hidden_counts[hit] / np.log2(pos[hit] + 2.0)))
            ideal = np.sort(hidden_counts[pos_gain])[::-1][:k]
            out[metric] = dcg / float(np.sum(ideal * _discount(len(ideal))))
            continue
        rel = hidden_counts >= threshold
        n_rel = int(rel.sum())
        if n_rel == 0:
            continue
        rel_pos = np.sort(pos[rel & present])
        if family == "P":
            out[metric] = float(np.sum(rel_pos < k)) / k
        elif family == "R":
            out[metric] = float(np.sum(rel_pos < k)) / n_rel
        elif family == "MAP":
            hits = rel_pos[rel_pos < k]
            ap = float(np.sum(np.arange(1, len(hits) + 1) / (hits + 1.0))) if len(hits) else 0.0
            out[metric] = ap / min(n_rel, k)
        elif family == "Rank":
            if len(rel_pos) == 0:
                continue
            pct = rel_pos / (n - 1) if n > 1 else np.zeros(len(rel_pos))
            if weighted_rank:
                wt = hidden_counts[rel & present][np.argsort(pos[rel & present], kind="stable")]
                out[metric] = float(np.sum(wt * pct) / np.sum(wt))
            else:
                out[metric] = float(pct.mean())
    return out


@dataclass
class MetricReport:
    system: str
    per_user: dict[int, dict[str, float]]
    aggregate: dict[str, float]
    users_skipped: dict[str, int] = field(default_factory=dict)

    def value(self, metric: str) -> float:
        return self.aggregate.get(metric, float("nan"))

    def user_values(self, metric: str) -> dict[int, float]:
        return {u: v[metric] for u, v in self.per_user.items() if metric in v}


def ground_truth(m: PlaycountMatrix, hidden_mask: np.ndarray, users) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per user: (hidden items, hidden playcounts) taken from the masked entries."""
    c = m.counts
    out = {}
    for u in np.asarray(users).tolist():
        lo, hi = c.indptr[u], c.indptr[u + 1]
        sel = hidden_mask[lo:hi]
        out[u] = (c.indices[lo:hi][sel], c.data[lo:hi][sel])
    return out


def exclusions(m: PlaycountMatrix, visible_mask: np.ndarray, users) -> dict[int, np.ndarray]:
    c = m.counts
    out = {}
    for u in np.asarray(users).tolist():
        lo, hi = c.indptr[u], c.indptr[u + 1]
        out[u] = c.indices[lo:hi][visible_mask[lo:hi]]
    return out


def evaluate_lists(
    system: str,
    lists: Mapping[int, np.ndarray],
    truth: Mapping[int, tuple[np.ndarray, np.ndarray]],
    catalog_size: int,
    metrics: Iterable[str] = RANKING_METRICS,
    weighted_rank: bool = False,
) -> MetricReport:
    """Score full ranked lists against hidden ground truth.

    Aggregates are unweighted means over the users for which a metric is
    defined; DIV and REP are computed over every user's top-500.
    """
    metrics = tuple(metrics)
    per_user: dict[int, dict[str, float]] = {}
    for u in sorted(lists):
        items, counts = truth.get(u, (np.zeros(0, np.int64), np.zeros(0)))
        per_user[u] = user_metrics(lists[u], items, counts, metrics, weighted_rank)
    aggregate: dict[str, float] = {}
    skipped: dict[str, int] = {}
    for metric in metrics:
        vals = [v[metric] for v in per_user.values() if metric in v]
        skipped[metric] = len(per_user) - len(vals)
        aggregate[metric] = float(np.mean(vals)) if vals else float("nan")
    ordered = [lists[u] for u in sorted(lists)]
    aggregate["DIV"] = diversity(ordered, catalog_size)
    aggregate["REP"] = repetition(ordered)
    return MetricReport(system, per_user, aggregate, skipped)


def full_lists(recommender, users, exclude: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
    return {u: recommender.rank(u, None, exclude[u]).items for u in np.asarray(users).tolist()}


def evaluate_system(recommender, m: PlaycountMatrix, split: SplitPlan, role: str = "test",
                    metrics: Iterable[str] = RANKING_METRICS, weighted_rank: bool = False) -> MetricReport:
    """Evaluate on Users-Test-Hidden (``role='test'``) or Users-Reg-Test (``role='reg'``).

    Each user's visible/train entries are excluded from the candidate set.
    """
    if role == "test":
        users, visible, hidden = split.users_test, split.test_visible, split.test_hidden
    elif role == "reg":
        users, visible, hidden = split.users_reg, split.reg_train, split.reg_test
    else:
        raise ValueError(f"unknown role {role!r}")
    lists = full_lists(recommender, users, exclusions(m, visible, users))
    return evaluate_lists(recommender.name, lists, ground_truth(m, hidden, users), m.n_artists,
                          metrics, weighted_rank)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_report_csv(reports: Iterable[MetricReport], path: str | Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["system", *ALL_METRICS])
    for r in reports:
        w.writerow([r.system, *(_fmt(r.value(mid)) for mid in ALL_METRICS)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_per_user_csv(reports: Iterable[MetricReport], user_ids, path: str | Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["system", "user_id", "metric", "value"])
    for r in reports:
        for u in sorted(r.per_user, key=lambda u: user_ids[u]):
            vals = r.per_user[u]
            for mid in RANKING_METRICS:
                if mid in vals:
                    w.writerow([r.system, user_ids[u], mid, _fmt(vals[mid])])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
