"""Stage runner: ingest, split, train, features, regress, hybrid, report.

Every stage reads its inputs from the output directory (plus the raw event
and song files) and writes its own artifacts there, so any stage can be
rerun on its own once its predecessors have run.
"""
from __future__ import annotations

import hashlib
import json
import logging
import platform
from pathlib import Path
from typing import Callable

import numpy as np
import scipy

from . import __version__
from .behavior import (
    BehaviorParams,
    build_feature_matrix,
    build_vocabulary,
    popularity_tables,
    read_features,
    write_features,
)
from .config import PipelineConfig
from .corpus import (
    Catalog,
    EventLog,
    PlaycountMatrix,
    SplitPlan,
    build_playcounts,
    class_summary,
    filter_min_listeners,
    make_split,
    parse_events,
    parse_songs,
    write_class_summary,
)
from .errors import ConfigError, StageDependencyError
from .hybrid import annotate, run_matrix, write_annotations, write_select_shares, write_weights
from .metrics import (
    MetricReport,
    evaluate_lists,
    exclusions,
    full_lists,
    ground_truth,
    write_per_user_csv,
    write_report_csv,
)
from .perfreg import fit_all, load_models, predict, save_models, train_counterparts, write_r2_table
from .recsys import (
    Bm25Params,
    FactorModel,
    FactorRecommender,
    IalsParams,
    PopularityRecommender,
    RandomRecommender,
    fit_svd,
    write_recommendations,
)

log = logging.getLogger(__name__)

STAGES = ("ingest", "split", "train", "features", "regress", "hybrid", "report")
STAGE_ALIASES = {"metrics": "report", "hybridize": "hybrid"}

# substream names; each is combined with the root seed
SEED_STREAMS = ("split", "init", "cv", "random", "synth")

PLAYCOUNTS = "playcounts.npz"
INGEST = "ingest.json"
CLASS_SUMMARY = "class_summary.csv"
SPLIT = "split.json"
SVD_MODEL = "svd_model.npz"
POP_MODEL = "pop_model.npz"
RECS_SVD = "recommendations_svd.tsv"
RECS_POP = "recommendations_pop.tsv"
FEATURES = "features.tsv"
SCHEMA = "schema.json"
REGMODELS = "regmodels.json"
R2_TABLE = "r2_table.csv"
COUNTERPART_REPORT = "counterpart_report.csv"
HYBRID_REPORT = "hybrid_report.csv"
ANNOTATIONS = "hybrid_annotations.csv"
SHARES = "select_shares.csv"
WEIGHTS = "weights.tsv"
REPORT = "report.csv"
PER_USER = "per_user.csv"
MANIFEST = "manifest.json"

# artifact -> stage that produces it
PRODUCER = {
    PLAYCOUNTS: "ingest", INGEST: "ingest", CLASS_SUMMARY: "ingest",
    SPLIT: "split",
    SVD_MODEL: "train", POP_MODEL: "train", RECS_SVD: "train", RECS_POP: "train",
    FEATURES: "features", SCHEMA: "features",
    REGMODELS: "regress", R2_TABLE: "regress", COUNTERPART_REPORT: "regress",
    HYBRID_REPORT: "hybrid", ANNOTATIONS: "hybrid", SHARES: "hybrid", WEIGHTS: "hybrid",
    REPORT: "report", PER_USER: "report", MANIFEST: "report",
}


def canonical_stage(name: str) -> str:
    stage = STAGE_ALIASES.get(name, name)
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {name!r}; expected one of {', '.join(STAGES)}")
    return stage


def _need(cfg: PipelineConfig, *names: str) -> list[Path]:
    paths = [cfg.out_dir / n for n in names]
    for name, p in zip(names, paths):
        if not p.exists():
            raise StageDependencyError(PRODUCER[name], name)
    return paths


def _raw_inputs(cfg: PipelineConfig) -> tuple[EventLog, Catalog]:
    if not cfg.events or not cfg.songs:
        raise ConfigError("events and songs paths are required")
    for p in (cfg.events, cfg.songs):
        if not Path(p).exists():
            raise ConfigError(f"input file not found: {p}")
    return parse_events(cfg.events), parse_songs(cfg.songs)


def _ials_params(cfg: PipelineConfig) -> IalsParams:
    return IalsParams(cfg.factors, cfg.regularization, cfg.epochs, Bm25Params(cfg.bm25_k1, cfg.bm25_b))


def _load_split(cfg: PipelineConfig) -> tuple[PlaycountMatrix, SplitPlan]:
    pc, sp = _need(cfg, PLAYCOUNTS, SPLIT)
    m = PlaycountMatrix.load(pc)
    return m, SplitPlan.from_json(sp.read_text(encoding="utf-8"), m)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def stage_ingest(cfg: PipelineConfig) -> None:
    events, catalog = _raw_inputs(cfg)
    raw, dropped = build_playcounts(events, catalog)
    m = filter_min_listeners(raw, cfg.min_listeners)
    m.save(cfg.out_dir / PLAYCOUNTS)
    write_class_summary(class_summary(events, catalog), cfg.out_dir / CLASS_SUMMARY)
    _write_json(cfg.out_dir / INGEST, {
        "events": len(events),
        "events_unresolved": dropped,
        "songs": len(catalog.songs),
        "users_raw": raw.n_users,
        "artists_raw": raw.n_artists,
        "users": m.n_users,
        "artists": m.n_artists,
        "entries": m.nnz,
        "min_listeners": cfg.min_listeners,
    })
    log.info("ingest: %d users x %d artists, %d entries", m.n_users, m.n_artists, m.nnz)


def stage_split(cfg: PipelineConfig) -> None:
    (pc,) = _need(cfg, PLAYCOUNTS)
    m = PlaycountMatrix.load(pc)
    plan = make_split(m, cfg.test_frac, cfg.reg_frac, cfg.hidden_frac, cfg.seed)
    (cfg.out_dir / SPLIT).write_text(plan.to_json(m), encoding="utf-8")
    log.info("split: %d train, %d test, %d reg users",
             len(plan.users_train), len(plan.users_test), len(plan.users_reg))


def stage_train(cfg: PipelineConfig) -> None:
    m, plan = _load_split(cfg)
    train = plan.main_training(m)
    model = fit_svd(train, _ials_params(cfg), cfg.seed, cfg.workers)
    model.save(cfg.out_dir / SVD_MODEL)
    pop = PopularityRecommender.fit(train, cfg.pop_by)
    np.savez(cfg.out_dir / POP_MODEL, popularity=pop.popularity, by=np.array(cfg.pop_by))
    excl = exclusions(m, plan.test_visible, plan.users_test)
    for rec, name in ((FactorRecommender(model), RECS_SVD), (pop, RECS_POP)):
        lists = [rec.rank(u, cfg.recommend_k, excl[u]) for u in plan.users_test.tolist()]
        write_recommendations(lists, m.user_ids, m.artist_ids, cfg.out_dir / name)
    log.info("train: final loss %.6g", model.loss_trace[-1])


def stage_features(cfg: PipelineConfig) -> None:
    m, plan = _load_split(cfg)
    events, catalog = _raw_inputs(cfg)
    rows = np.union1d(plan.users_test, plan.users_reg)
    users = sorted(m.user_ids[r] for r in rows.tolist())
    params = BehaviorParams(cfg.session_gap, cfg.skip_seconds, cfg.complete_fraction, cfg.exploratory_level)
    fm = build_feature_matrix(users, events, catalog, popularity_tables(events, catalog),
                              build_vocabulary(events, catalog), params)
    write_features(fm, cfg.out_dir / FEATURES, cfg.out_dir / SCHEMA)
    log.info("features: %d users x %d features", len(users), len(fm.schema))


def stage_regress(cfg: PipelineConfig) -> None:
    m, plan = _load_split(cfg)
    ft, sc = _need(cfg, FEATURES, SCHEMA)
    fm = read_features(ft, sc)
    cp = train_counterparts(m, plan, _ials_params(cfg), cfg.pop_by, cfg.seed, cfg.workers, cfg.metrics)
    rows = [m.user_row(u) for u in fm.user_ids]
    models = fit_all(fm.values, rows, cp.targets, cfg.cv_folds, cfg.seed)
    save_models(models, fm.schema, cfg.out_dir / REGMODELS)
    write_r2_table(models, cfg.out_dir / R2_TABLE)
    write_report_csv(cp.reports.values(), cfg.out_dir / COUNTERPART_REPORT)
    log.info("regress: %d models", len(models))


def _baselines(cfg: PipelineConfig, m: PlaycountMatrix, plan: SplitPlan):
    """Full rankings and ground truth for every test user."""
    sv, pp = _need(cfg, SVD_MODEL, POP_MODEL)
    model = FactorModel.load(sv)
    with np.load(pp) as z:
        pop = PopularityRecommender(z["popularity"])
    users = plan.users_test
    excl = exclusions(m, plan.test_visible, users)
    lists = {
        "RANDOM": full_lists(RandomRecommender(m.n_artists, cfg.seed), users, excl),
        "POP": full_lists(pop, users, excl),
        "SVD-I": full_lists(FactorRecommender(model), users, excl),
    }
    return lists, ground_truth(m, plan.test_hidden, users)


def _predictions(cfg, m, plan, lists, truth) -> dict[str, dict[str, dict[int, float]]]:
    if cfg.oracle_mode:
        out = {}
        for system in ("SVD-I", "POP"):
            r = evaluate_lists(system, lists[system], truth, m.n_artists, cfg.metrics, cfg.weighted_rank)
            out[system] = {mid: r.user_values(mid) for mid in cfg.metrics}
        return out
    rm, ft, sc = _need(cfg, REGMODELS, FEATURES, SCHEMA)
    models, schema = load_models(rm)
    fm = read_features(ft, sc)
    if list(schema) != list(fm.schema):
        raise StageDependencyError("regress", f"{REGMODELS} (feature schema changed)")
    test_ids = [m.user_ids[u] for u in plan.users_test.tolist()]
    X = fm.rows(test_ids)
    out: dict[str, dict[str, dict[int, float]]] = {}
    for (system, metric), model in models.items():
        if metric in cfg.metrics:
            pred = predict(model, X)
            out.setdefault(system, {})[metric] = dict(zip(plan.users_test.tolist(), pred.tolist()))
    return out


def stage_hybrid(cfg: PipelineConfig) -> None:
    m, plan = _load_split(cfg)
    lists, truth = _baselines(cfg, m, plan)
    preds = _predictions(cfg, m, plan, lists, truth)
    result = run_matrix(lists, truth, m.n_artists, preds, cfg.metrics, cfg.strategies, cfg.weighted_rank)
    reports = list(result.reports.values())
    write_report_csv(reports, cfg.out_dir / HYBRID_REPORT)
    write_annotations(annotate(result.reports), cfg.out_dir / ANNOTATIONS)
    write_select_shares(result.shares, cfg.out_dir / SHARES)
    fuse = {k: v for k, v in result.weights.items() if not k.startswith("FUSE-AVG")}
    write_weights(fuse, m.user_ids, cfg.out_dir / WEIGHTS)
    log.info("hybrid: %d systems evaluated", len(reports))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def stage_report(cfg: PipelineConfig) -> None:
    m, plan = _load_split(cfg)
    lists, truth = _baselines(cfg, m, plan)
    _need(cfg, HYBRID_REPORT)
    reports: list[MetricReport] = [
        evaluate_lists(name, lists[name], truth, m.n_artists, cfg.metrics, cfg.weighted_rank)
        for name in ("RANDOM", "POP", "SVD-I")
    ]
    write_report_csv(reports, cfg.out_dir / REPORT)
    write_per_user_csv(reports, m.user_ids, cfg.out_dir / PER_USER)
    artifacts = {
        name: _sha256(cfg.out_dir / name)
        for name in sorted(PRODUCER)
        if name != MANIFEST and (cfg.out_dir / name).exists()
    }
    _write_json(cfg.out_dir / MANIFEST, {
        "config": cfg.to_dict(runtime=False),
        "seed": cfg.seed,
        "seed_streams": list(SEED_STREAMS),
        "versions": {
            "recfusion": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "artifacts": artifacts,
    })


RUNNERS: dict[str, Callable[[PipelineConfig], None]] = {
    "ingest": stage_ingest,
    "split": stage_split,
    "train": stage_train,
    "features": stage_features,
    "regress": stage_regress,
    "hybrid": stage_hybrid,
    "report": stage_report,
}


def run_stage(cfg: PipelineConfig, stage: str) -> None:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    RUNNERS[canonical_stage(stage)](cfg)


def run_pipeline(cfg: PipelineConfig, start: str | None = None) -> Path:
    """Run every stage from ``start`` (default: the first) to the end; returns the output directory."""
    first = STAGES.index(canonical_stage(start)) if start else 0
    for stage in STAGES[first:]:
        if stage == "regress" and cfg.oracle_mode:
            log.info("regress: skipped in oracle mode")
            continue
        run_stage(cfg, stage)
    return cfg.out_dir
