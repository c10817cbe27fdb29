"""Per-user combination of SVD-I and POP: SELECT, FUSE and FUSE-AVG."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .metrics import ALL_METRICS, RANKING_METRICS, MetricReport, evaluate_lists, higher_is_better
from .recsys import RankedList

STRATEGIES = ("SELECT", "FUSE", "FUSE-AVG")
BASELINES = ("RANDOM", "POP", "SVD-I")


@dataclass(frozen=True)
class FusionWeights:
    w_s: float
    w_p: float

    def __post_init__(self):
        if self.w_s < 0 or self.w_p < 0 or abs(self.w_s + self.w_p - 1.0) > 1e-12:
            raise ValueError(f"invalid fusion weights ({self.w_s}, {self.w_p})")


@dataclass(frozen=True)
class HybridConfig:
    strategy: str
    target_metric: str

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.target_metric not in RANKING_METRICS:
            raise ValueError(f"unknown target metric {self.target_metric!r}")

    @property
    def higher_is_better(self) -> bool:
        return higher_is_better(self.target_metric)

    @property
    def name(self) -> str:
        return f"{self.strategy}-{self.target_metric}"


def weights_from_predictions(m_s: float, m_p: float, higher_is_better: bool = True) -> FusionWeights:
    """Weights proportional to predicted quality; lower-is-better metrics use 1 - m."""
    for v in (m_s, m_p):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"predicted metric {v} outside [0, 1]")
    a, b = (m_s, m_p) if higher_is_better else (1.0 - m_s, 1.0 - m_p)
    if a + b == 0:
        return FusionWeights(0.5, 0.5)
    return FusionWeights(a / (a + b), b / (a + b))


def _items(ranked) -> np.ndarray:
    return np.asarray(getattr(ranked, "items", ranked), dtype=np.int64)


def fuse_rankings(r_s, r_p, w: FusionWeights) -> RankedList:
    """Combine two full rankings of the same candidates by (rank_p*w_p + rank_s*w_s) / 2.

    Ranks are 1-based and the combined score is sorted ascending; ties go to
    the better SVD-I rank, then the lower item index.
    """
    s, p = _items(r_s), _items(r_p)
    order_s, order_p = np.argsort(s, kind="stable"), np.argsort(p, kind="stable")
    ids = s[order_s]
    if len(s) != len(p) or not np.array_equal(ids, p[order_p]):
        raise ValueError("rankings do not cover the same candidate set")
    rank_s = order_s + 1.0
    rank_p = order_p + 1.0
    combined = (rank_p * w.w_p + rank_s * w.w_s) / 2
    fused = ids[np.lexsort((ids, rank_s, combined))]
    return RankedList(getattr(r_s, "user", -1), fused)


def _prediction(preds: Mapping[int, float], user: int) -> float | None:
    v = preds.get(user)
    return None if v is None or not np.isfinite(v) else float(v)


def run_select(
    preds_s: Mapping[int, float],
    preds_p: Mapping[int, float],
    lists_s: Mapping[int, np.ndarray],
    lists_p: Mapping[int, np.ndarray],
    target_metric: str,
) -> tuple[dict[int, np.ndarray], dict[int, str]]:
    """Each user gets the full list of the system predicted to do better; ties go to SVD-I."""
    better = higher_is_better(target_metric)
    lists, choice = {}, {}
    for u in sorted(lists_s):
        ms, mp = _prediction(preds_s, u), _prediction(preds_p, u)
        use_pop = ms is not None and mp is not None and (mp > ms if better else mp < ms)
        choice[u] = "POP" if use_pop else "SVD-I"
        lists[u] = lists_p[u] if use_pop else lists_s[u]
    return lists, choice


def select_shares(choice: Mapping[int, str]) -> tuple[float, float]:
    """Percentage of users assigned to SVD-I and to POP."""
    if not choice:
        return 0.0, 0.0
    n_s = sum(1 for c in choice.values() if c == "SVD-I")
    return 100.0 * n_s / len(choice), 100.0 * (len(choice) - n_s) / len(choice)


def user_weights(preds_s, preds_p, users: Sequence[int], target_metric: str) -> dict[int, FusionWeights]:
    """Per-user weights; a user without both predictions gets equal weights."""
    better = higher_is_better(target_metric)
    out = {}
    for u in users:
        ms, mp = _prediction(preds_s, u), _prediction(preds_p, u)
        if ms is None or mp is None:
            out[u] = FusionWeights(0.5, 0.5)
        else:
            out[u] = weights_from_predictions(ms, mp, better)
    return out


def average_weights(weights: Mapping[int, FusionWeights]) -> FusionWeights:
    w_s = float(np.mean([w.w_s for w in weights.values()]))
    w_p = float(np.mean([w.w_p for w in weights.values()]))
    return FusionWeights(w_s, w_p)


def run_fuse(
    preds_s: Mapping[int, float],
    preds_p: Mapping[int, float],
    lists_s: Mapping[int, np.ndarray],
    lists_p: Mapping[int, np.ndarray],
    target_metric: str,
    averaged: bool = False,
) -> tuple[dict[int, np.ndarray], dict[int, FusionWeights]]:
    """FUSE uses each user's own weights; FUSE-AVG applies their mean to everyone."""
    users = sorted(lists_s)
    weights = user_weights(preds_s, preds_p, users, target_metric)
    if averaged and weights:
        avg = average_weights(weights)
        weights = {u: avg for u in users}
    lists = {u: fuse_rankings(lists_s[u], lists_p[u], weights[u]).items for u in users}
    return lists, weights


@dataclass
class MatrixResult:
    reports: dict[str, MetricReport]
    shares: dict[str, tuple[float, float]] = field(default_factory=dict)
    weights: dict[str, dict[int, FusionWeights]] = field(default_factory=dict)


def run_matrix(
    lists: Mapping[str, Mapping[int, np.ndarray]],
    truth,
    catalog_size: int,
    predictions: Mapping[str, Mapping[str, Mapping[int, float]]],
    metrics: Sequence[str] = RANKING_METRICS,
    strategies: Sequence[str] = STRATEGIES,
    weighted_rank: bool = False,
) -> MatrixResult:
    """Evaluate the baselines and every (strategy, target metric) hybrid.

    ``lists`` maps RANDOM/POP/SVD-I to full per-user rankings; ``predictions``
    maps SVD-I/POP to metric -> user -> predicted (or, in oracle mode, measured)
    value.
    """
    reports: dict[str, MetricReport] = {}
    for name in BASELINES:
        if name in lists:
            reports[name] = evaluate_lists(name, lists[name], truth, catalog_size, metrics, weighted_rank)
    result = MatrixResult(reports)
    for metric in metrics:
        if metric not in predictions.get("SVD-I", {}) or metric not in predictions.get("POP", {}):
            raise KeyError(f"missing regression predictions for {metric}")
        ps, pp = predictions["SVD-I"][metric], predictions["POP"][metric]
        for strategy in strategies:
            cfg = HybridConfig(strategy, metric)
            if strategy == "SELECT":
                hl, choice = run_select(ps, pp, lists["SVD-I"], lists["POP"], metric)
                result.shares[cfg.name] = select_shares(choice)
            else:
                hl, w = run_fuse(ps, pp, lists["SVD-I"], lists["POP"], metric, strategy == "FUSE-AVG")
                result.weights[cfg.name] = w
            reports[cfg.name] = evaluate_lists(cfg.name, hl, truth, catalog_size, metrics, weighted_rank)
    return result


def annotate(reports: Mapping[str, MetricReport]) -> dict[str, dict[str, str]]:
    """Per cell: 'best' (best over all systems), 'beats' (better than both POP and SVD-I)."""
    out: dict[str, dict[str, str]] = {name: {} for name in reports}
    for mid in ALL_METRICS:
        sign = 1.0 if higher_is_better(mid) else -1.0
        vals = {n: r.value(mid) for n, r in reports.items() if np.isfinite(r.value(mid))}
        best = max(sign * v for v in vals.values()) if vals else None
        refs = [sign * reports[b].value(mid) for b in ("POP", "SVD-I") if b in reports]
        for name, v in vals.items():
            flags = []
            if best is not None and sign * v == best:
                flags.append("best")
            if name not in BASELINES and refs and all(sign * v > r for r in refs):
                flags.append("beats")
            out[name][mid] = "+".join(flags)
    return out


def write_annotations(annotations: Mapping[str, Mapping[str, str]], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["system", *ALL_METRICS])
    for name, flags in annotations.items():
        w.writerow([name, *(flags.get(mid, "") for mid in ALL_METRICS)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_select_shares(shares: Mapping[str, tuple[float, float]], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["system", "pct_users_SVD-I", "pct_users_POP"])
    for name, (s, p) in shares.items():
        w.writerow([name, repr(s), repr(p)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_weights(weights: Mapping[str, Mapping[int, FusionWeights]], user_ids, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("system\tuser_id\tw_s\tw_p\n")
        for name, per_user in weights.items():
            for u in sorted(per_user, key=lambda u: user_ids[u]):
                fw = per_user[u]
                fh.write(f"{name}\t{user_ids[u]}\t{fw.w_s!r}\t{fw.w_p!r}\n")
