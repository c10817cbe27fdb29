"""Acceptance gate: one PASS/FAIL (or WARN) line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (the lines appear in the
terminal summary) or directly with ``python tests/test_acceptance.py``.
"""
from __future__ import annotations

import csv
import functools
import sys
import tempfile
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp

sys.path.insert(0, str(Path(__file__).parent))
import oracles  # noqa: E402

from recfusion.behavior import build_feature_matrix, build_vocabulary, popularity_tables  # noqa: E402
from recfusion.cli import main as cli_main  # noqa: E402
from recfusion.config import PipelineConfig  # noqa: E402
from recfusion.corpus import build_playcounts, filter_min_listeners, make_split  # noqa: E402
from recfusion.hybrid import run_fuse, run_matrix  # noqa: E402
from recfusion.metrics import (  # noqa: E402
    LOWER_IS_BETTER,
    RANKING_METRICS,
    diversity,
    evaluate_lists,
    evaluate_system,
    exclusions,
    full_lists,
    ground_truth,
    repetition,
    user_metrics,
)
from recfusion.perfreg import fit  # noqa: E402
from recfusion.pipeline import run_pipeline  # noqa: E402
from recfusion.recsys import (  # noqa: E402
    FactorRecommender,
    PopularityRecommender,
    RandomRecommender,
    bm25_weight,
    fit_svd,
    normal_equation_residuals,
    train_ials,
)
from recfusion.synth import SynthSpec, synth_generate, write_corpus  # noqa: E402

N_SEEDS = 30
RESULTS: dict[int, str] = {}


def report(n: int, status: str, title: str, detail: str) -> str:
    line = f"[{status}] C{n} {title}: {detail}"
    RESULTS[n] = line
    print(line, flush=True)
    return status


def criterion_corpus(seed: int) -> SynthSpec:
    return SynthSpec(n_users=2000, n_artists=500, zipf_exponent=1.1, taste_dim=4, seed=seed)


# ---- 1 ------------------------------------------------------------------------

def check_metric_oracles() -> str:
    t0 = time.perf_counter()
    worst = 0.0
    rng = np.random.default_rng(20240101)
    for _ in range(200):
        n_items = int(rng.integers(2, 61))
        n_users = int(rng.integers(1, 6))
        lists, users = [], []
        for _ in range(n_users):
            ranked = rng.permutation(n_items)[: int(rng.integers(1, min(50, n_items) + 1))]
            hidden_items = rng.choice(n_items, size=int(rng.integers(1, n_items + 1)), replace=False)
            hidden = dict(zip(hidden_items.tolist(), rng.integers(1, 25, size=len(hidden_items)).tolist()))
            got = user_metrics(ranked, hidden_items, np.array([hidden[i] for i in hidden_items.tolist()]))
            want = oracles.all_metrics(ranked.tolist(), hidden)
            if set(got) != set(want):
                worst = np.inf
            worst = max([worst, *(abs(got[k] - want[k]) for k in want if k in got)])
            lists.append(ranked)
            users.append(ranked.tolist())
        for k in (10, 500):
            worst = max(worst, abs(diversity(lists, n_items, k) - oracles.diversity(users, n_items, k)))
            worst = max(worst, abs(repetition(lists, k) - oracles.repetition(users, k)))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and dt < 10
    return report(1, "PASS" if ok else "FAIL", "metric oracle equivalence",
                  f"200 instances, 12 metrics + DIV/REP, max |err| = {worst:.1e} (tol 1e-12), {dt:.1f} s (limit 10 s)")


# ---- 2 ------------------------------------------------------------------------

def check_ials() -> str:
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    dense = np.where(rng.random((500, 200)) < 0.05, rng.integers(1, 40, (500, 200)), 0)
    w = bm25_weight(sp.csr_matrix(dense + (dense.sum(1, keepdims=True) == 0) * (np.arange(200) == 0)))
    wt = w.T.tocsr()
    worst = [0.0]

    def check(epoch, side, solved, fixed):
        res = normal_equation_residuals(w if side == "user" else wt, solved, fixed, 0.1)
        worst[0] = max(worst[0], float(res.max()))

    model = train_ials(w, factors=20, regularization=0.1, epochs=50, seed=0, callback=check)
    trace = model.loss_trace
    rises = int(np.sum(trace[1:] > trace[:-1] * (1 + 1e-9)))
    dt = time.perf_counter() - t0
    ok = rises == 0 and worst[0] <= 1e-8 and dt < 60
    return report(2, "PASS" if ok else "FAIL", "iALS correctness",
                  f"loss rises = {rises} over 50 epochs (tol 1e-9 rel), max normal-equation residual = "
                  f"{worst[0]:.1e} (tol 1e-8), {dt:.1f} s (limit 60 s)")


# ---- 3 ------------------------------------------------------------------------

def check_random_rank() -> str:
    corpus = synth_generate(criterion_corpus(0))
    m = filter_min_listeners(build_playcounts(corpus.events, corpus.catalog)[0])
    plan = make_split(m, test_frac=0.25, seed=0)
    r = evaluate_system(RandomRecommender(m.n_artists, seed=0), m, plan, metrics=["Rank1"])
    v = r.value("Rank1")
    ok = len(plan.users_test) >= 500 and 0.48 <= v <= 0.52
    return report(3, "PASS" if ok else "FAIL", "RANDOM baseline sanity",
                  f"Rank1 = {v:.4f} on {len(plan.users_test)} test users (want [0.48, 0.52], >= 500 users)")


# ---- 4 and 9 share one sweep ---------------------------------------------------

@functools.lru_cache(maxsize=None)
def seed_sweep() -> tuple[list[dict], float]:
    """Full pipeline per seed on the criterion corpus, limited to the two metrics needed."""
    rows = []
    t0 = time.perf_counter()
    with tempfile.TemporaryDirectory() as tmp:
        for seed in range(N_SEEDS):
            d = Path(tmp) / f"s{seed}"
            ev, so = write_corpus(synth_generate(criterion_corpus(seed)), d / "data")
            cfg = PipelineConfig(events=str(ev), songs=str(so), out=str(d / "out"), seed=seed,
                                 metrics=("MAP1@500", "nDCG@500"), strategies=("FUSE",))
            run_pipeline(cfg)
            agg = {r["system"]: r for r in csv.DictReader(open(d / "out/hybrid_report.csv"))}
            per_user: dict[str, dict[str, float]] = {}
            for r in csv.DictReader(open(d / "out/per_user.csv")):
                if r["metric"] == "MAP1@500" and r["system"] in ("SVD-I", "POP"):
                    per_user.setdefault(r["user_id"], {})[r["system"]] = float(r["value"])
            pop_wins = sum(1 for v in per_user.values() if v["POP"] > v["SVD-I"]) / len(per_user)
            rows.append({
                "seed": seed,
                "map_svd": float(agg["SVD-I"]["MAP1@500"]),
                "map_pop": float(agg["POP"]["MAP1@500"]),
                "pop_win_frac": pop_wins,
                "ndcg_svd": float(agg["SVD-I"]["nDCG@500"]),
                "ndcg_pop": float(agg["POP"]["nDCG@500"]),
                "ndcg_fuse": float(agg["FUSE-nDCG@500"]["nDCG@500"]),
            })
    return rows, time.perf_counter() - t0


def check_trend() -> str:
    rows, dt = seed_sweep()
    wins = sum(r["map_svd"] > r["map_pop"] for r in rows)
    min_frac = min(r["pop_win_frac"] for r in rows)
    ok = wins >= 27 and min_frac > 0 and dt < 15 * 60
    return report(4, "PASS" if ok else "FAIL", "trend reproduction",
                  f"SVD-I > POP on MAP1@500 in {wins}/{N_SEEDS} seeds (want >= 27); POP better for "
                  f"{100 * min_frac:.1f}%-{100 * max(r['pop_win_frac'] for r in rows):.1f}% of users "
                  f"(want > 0 in every seed); {dt / 60:.1f} min (limit 15)")


def check_fuse_ndcg() -> str:
    rows, _ = seed_sweep()
    wins = sum(r["ndcg_fuse"] > max(r["ndcg_svd"], r["ndcg_pop"]) for r in rows)
    status = "PASS" if wins >= 20 else "WARN" if wins >= 15 else "FAIL"
    gain = np.mean([r["ndcg_fuse"] - max(r["ndcg_svd"], r["ndcg_pop"]) for r in rows])
    return report(9, status, "FUSE-nDCG@500 beats both baselines",
                  f"{wins}/{N_SEEDS} seeds (pass >= 20, warn 15-19); mean gain over best baseline {gain:+.4f}")


# ---- 5 and 6 use one trained corpus --------------------------------------------

@functools.lru_cache(maxsize=None)
def trained_lists():
    corpus = synth_generate(criterion_corpus(0))
    m = filter_min_listeners(build_playcounts(corpus.events, corpus.catalog)[0])
    plan = make_split(m, seed=0)
    train = plan.main_training(m)
    users = plan.users_test
    excl = exclusions(m, plan.test_visible, users)
    lists = {
        "RANDOM": full_lists(RandomRecommender(m.n_artists), users, excl),
        "POP": full_lists(PopularityRecommender.fit(train), users, excl),
        "SVD-I": full_lists(FactorRecommender(fit_svd(train, seed=0)), users, excl),
    }
    return lists, ground_truth(m, plan.test_hidden, users), m.n_artists


def check_oracle_select() -> str:
    lists, truth, n = trained_lists()
    base = {s: evaluate_lists(s, lists[s], truth, n) for s in ("SVD-I", "POP")}
    preds = {s: {mid: base[s].user_values(mid) for mid in RANKING_METRICS} for s in base}
    result = run_matrix(lists, truth, n, preds, strategies=("SELECT",))
    matched = total = 0
    agg_ok = True
    for mid in RANKING_METRICS:
        best = min if mid in LOWER_IS_BETTER else max
        sel = result.reports[f"SELECT-{mid}"]
        for u, v in sel.user_values(mid).items():
            total += 1
            matched += v == best(base["SVD-I"].per_user[u][mid], base["POP"].per_user[u][mid])
        a, s, p = sel.value(mid), base["SVD-I"].value(mid), base["POP"].value(mid)
        agg_ok &= (a <= min(s, p)) if best is min else (a >= max(s, p))
    ok = matched == total and agg_ok
    return report(5, "PASS" if ok else "FAIL", "oracle-mode SELECT dominance",
                  f"per-user max matched for {matched}/{total} (user, metric) pairs over 12 metrics; "
                  f"aggregate >= both baselines: {agg_ok}")


def check_degenerate_fusion() -> str:
    lists, truth, n = trained_lists()
    users = list(lists["SVD-I"])
    ones = {u: 1.0 for u in users}
    zeros = {u: 0.0 for u in users}
    ok = True
    for preds_s, preds_p, target in ((ones, zeros, "SVD-I"), (zeros, ones, "POP")):
        fused, _ = run_fuse(preds_s, preds_p, lists["SVD-I"], lists["POP"], "P1@10")
        a = evaluate_lists(target, fused, truth, n)
        b = evaluate_lists(target, lists[target], truth, n)
        ok &= a.per_user == b.per_user and a.aggregate == b.aggregate and a.users_skipped == b.users_skipped
    return report(6, "PASS" if ok else "FAIL", "degenerate fusion identity",
                  f"weights (1,0) -> SVD-I and (0,1) -> POP MetricReports bit-identical: {ok}")


# ---- 7 ------------------------------------------------------------------------

def check_regression() -> str:
    corpus = synth_generate(criterion_corpus(0))
    users = sorted(set(corpus.events.user_ids.tolist()))[:200]
    fm = build_feature_matrix(users, corpus.events, corpus.catalog,
                              popularity_tables(corpus.events, corpus.catalog),
                              build_vocabulary(corpus.events, corpus.catalog))
    X = fm.values
    rng = np.random.default_rng(1)
    y = X @ rng.normal(size=X.shape[1]) + 0.25
    model = fit(X, y)
    keep = X.std(axis=0) > 0
    Z = (X[:, keep] - X[:, keep].mean(axis=0)) / X[:, keep].std(axis=0)
    tol = np.finfo(float).eps * max(Z.shape)
    beta = np.linalg.pinv(Z, rcond=tol) @ (y - y.mean())
    coef_err = float(np.abs(model.coefficients[keep] - beta).max())

    preds_s = dict(enumerate(rng.random(300)))
    preds_p = dict(enumerate(rng.random(300)))
    lists = {u: rng.permutation(25) for u in range(300)}
    _, per_user = run_fuse(preds_s, preds_p, lists, lists, "nDCG@500")
    _, avg = run_fuse(preds_s, preds_p, lists, lists, "nDCG@500", averaged=True)
    w_err = max(abs(avg[0].w_s - np.mean([w.w_s for w in per_user.values()])),
                abs(avg[0].w_p - np.mean([w.w_p for w in per_user.values()])))
    ok = model.r2_train >= 1 - 1e-9 and coef_err <= 1e-6 and w_err <= 1e-12
    return report(7, "PASS" if ok else "FAIL", "regression correctness",
                  f"r2_train = {model.r2_train:.12f} (want >= 1-1e-9); |coef - pinv| = {coef_err:.1e} (tol 1e-6) "
                  f"on {X.shape[0]}x{X.shape[1]} behaviour features; FUSE-AVG weight error {w_err:.1e} (tol 1e-12)")


# ---- 8 ------------------------------------------------------------------------

def check_determinism() -> str:
    with tempfile.TemporaryDirectory() as tmp:
        ev, so = write_corpus(synth_generate(criterion_corpus(0)), Path(tmp) / "data")
        outs = []
        for i, workers in enumerate(("1", "2")):
            out = Path(tmp) / f"run{i}"
            code = cli_main(["pipeline", "--events", str(ev), "--songs", str(so), "--out", str(out),
                             "--seed", "3", "--workers", workers])
            outs.append((code, out))
        names = sorted(p.name for p in outs[0][1].glob("*.csv"))
        same = [n for n in names if (outs[0][1] / n).read_bytes() == (outs[1][1] / n).read_bytes()]
        codes = [c for c, _ in outs]
    ok = codes == [0, 0] and len(same) == len(names) > 0
    return report(8, "PASS" if ok else "FAIL", "pipeline determinism",
                  f"{len(same)}/{len(names)} report CSVs byte-identical across two runs (--workers 1 vs 2)")


CHECKS = {
    1: check_metric_oracles,
    2: check_ials,
    3: check_random_rank,
    4: check_trend,
    5: check_oracle_select,
    6: check_degenerate_fusion,
    7: check_regression,
    8: check_determinism,
    9: check_fuse_ndcg,
}


@pytest.mark.parametrize("criterion", sorted(CHECKS))
def test_acceptance(criterion):
    status = CHECKS[criterion]()
    if status == "WARN":
        warnings.warn(RESULTS[criterion])
    assert status in ("PASS", "WARN"), RESULTS[criterion]


if __name__ == "__main__":
    statuses = [CHECKS[n]() for n in sorted(CHECKS)]
    sys.exit(0 if all(s in ("PASS", "WARN") for s in statuses) else 1)
