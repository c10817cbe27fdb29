"""Per-(system, metric) linear regressions from behaviour features to measured metric values."""
from __future__ import annotations

import csv
import io
import json
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._rng import substream
from .corpus import PlaycountMatrix, SplitPlan
from .metrics import RANKING_METRICS, MetricReport, evaluate_system
from .recsys import FactorRecommender, IalsParams, PopularityRecommender, fit_svd

SYSTEMS = ("SVD-I", "POP")


@dataclass
class RegressionModel:
    metric_id: str
    system_id: str
    coefficients: np.ndarray  # on z-scored features; 0 for dropped columns
    intercept: float
    feature_means: np.ndarray
    feature_stds: np.ndarray  # 0 marks a zero-variance column that was dropped
    r2_train: float
    r2_cv: float
    n_train: int = 0

    @property
    def retained(self) -> np.ndarray:
        return self.feature_stds > 0

    @property
    def raw_coefficients(self) -> np.ndarray:
        """Coefficients on the unscaled features."""
        out = np.zeros_like(self.coefficients)
        keep = self.retained
        out[keep] = self.coefficients[keep] / self.feature_stds[keep]
        return out

    @property
    def raw_intercept(self) -> float:
        return float(self.intercept - self.raw_coefficients @ self.feature_means)

    def predict_raw(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != len(self.coefficients):
            raise ValueError(f"expected {len(self.coefficients)} features, got {X.shape[1]}")
        keep = self.retained
        Z = (X[:, keep] - self.feature_means[keep]) / self.feature_stds[keep]
        return self.intercept + Z @ self.coefficients[keep]

    def to_dict(self) -> dict:
        return {
            "metric": self.metric_id,
            "system": self.system_id,
            "coefficients": self.coefficients.tolist(),
            "intercept": self.intercept,
            "feature_means": self.feature_means.tolist(),
            "feature_stds": self.feature_stds.tolist(),
            "r2_train": self.r2_train,
            "r2_cv": self.r2_cv,
            "n_train": self.n_train,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RegressionModel:
        return cls(
            d["metric"],
            d["system"],
            np.array(d["coefficients"], dtype=np.float64),
            float(d["intercept"]),
            np.array(d["feature_means"], dtype=np.float64),
            np.array(d["feature_stds"], dtype=np.float64),
            float(d["r2_train"]),
            float(d["r2_cv"]),
            int(d.get("n_train", 0)),
        )


def _r2(y: np.ndarray, fitted: np.ndarray) -> float:
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0:
        return 0.0
    return 1.0 - float(np.sum((y - fitted) ** 2)) / sst


def _solve(X: np.ndarray, y: np.ndarray):
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    stds[stds <= 1e-12 * np.maximum(1.0, np.abs(means))] = 0.0
    keep = stds > 0
    coef = np.zeros(X.shape[1])
    ybar = float(y.mean())
    if keep.any():
        # SVD-based minimum-norm solution: exactly collinear feature blocks
        # (hour and weekday shares each sum to one) get no weight from round-off
        Z = (X[:, keep] - means[keep]) / stds[keep]
        coef[keep] = np.linalg.lstsq(Z, y - ybar, rcond=None)[0]
    return coef, ybar, means, stds


def fit(
    X: np.ndarray,
    y: np.ndarray,
    metric_id: str = "",
    system_id: str = "",
    cv_folds: int = 5,
    seed: int = 0,
    user_ids: Sequence[str] | None = None,
) -> RegressionModel:
    """Ordinary least squares on z-scored features.

    Zero-variance columns are dropped; rank-deficient designs (including fewer
    users than features) get the minimum-norm solution. ``r2_cv`` comes from
    seeded k-fold out-of-fold predictions.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != len(y):
        raise ValueError("feature matrix and targets disagree in length")
    if len(y) < 2:
        raise ValueError("need at least 2 users to fit a regression")
    bad = np.flatnonzero(~np.isfinite(y))
    if len(bad):
        who = user_ids[bad[0]] if user_ids is not None else int(bad[0])
        raise ValueError(f"non-finite target for user {who}")
    coef, intercept, means, stds = _solve(X, y)
    model = RegressionModel(metric_id, system_id, coef, intercept, means, stds, 0.0, 0.0, len(y))
    model.r2_train = _r2(y, model.predict_raw(X))

    folds = min(cv_folds, len(y))
    perm = substream(seed, "cv", zlib.crc32(f"{system_id}/{metric_id}".encode())).permutation(len(y))
    oof = np.empty(len(y))
    for part in np.array_split(perm, folds):
        train = np.setdiff1d(perm, part)
        c, b, mu, sd = _solve(X[train], y[train])
        sub = RegressionModel(metric_id, system_id, c, b, mu, sd, 0.0, 0.0)
        oof[part] = sub.predict_raw(X[part])
    model.r2_cv = _r2(y, oof)
    return model


def predict(model: RegressionModel, x: np.ndarray, clamp: bool = True) -> np.ndarray | float:
    """Predicted metric value(s); clamped to [0, 1] unless ``clamp`` is false."""
    x = np.asarray(x, dtype=np.float64)
    out = model.predict_raw(x)
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return float(out[0]) if x.ndim == 1 else out


@dataclass
class CounterpartResult:
    targets: dict[str, dict[str, dict[int, float]]]  # system -> metric -> user row -> value
    reports: dict[str, MetricReport]


def train_counterparts(
    m: PlaycountMatrix,
    split: SplitPlan,
    params: IalsParams = IalsParams(),
    pop_by: str = "playcount",
    seed: int = 0,
    workers: int = 1,
    metrics: Iterable[str] = RANKING_METRICS,
) -> CounterpartResult:
    """Retrain SVD-I and POP without Users-Reg-Test and score every Users-Reg user on it."""
    if len(split.users_reg) == 0:
        raise ValueError("no regression users")
    train = split.counterpart_training(m)
    systems = {
        "SVD-I": FactorRecommender(fit_svd(train, params, seed, workers)),
        "POP": PopularityRecommender.fit(train, pop_by),
    }
    metrics = tuple(metrics)
    reports = {name: evaluate_system(rec, m, split, "reg", metrics) for name, rec in systems.items()}
    targets = {name: {mid: r.user_values(mid) for mid in metrics} for name, r in reports.items()}
    return CounterpartResult(targets, reports)


def fit_all(
    features: np.ndarray,
    feature_users: Sequence[int],
    targets: Mapping[str, Mapping[str, Mapping[int, float]]],
    cv_folds: int = 5,
    seed: int = 0,
) -> dict[tuple[str, str], RegressionModel]:
    """One model per (system, metric); users lacking a target value are left out of that fit."""
    row_of = {u: i for i, u in enumerate(feature_users)}
    models = {}
    for system in targets:
        for metric, values in targets[system].items():
            users = sorted(u for u in values if u in row_of)
            if len(users) < 2:
                raise ValueError(f"too few users with {metric} values for {system}")
            X = features[[row_of[u] for u in users]]
            y = np.array([values[u] for u in users])
            models[(system, metric)] = fit(X, y, metric, system, cv_folds, seed)
    return models


def save_models(models: Mapping[tuple[str, str], RegressionModel], schema: Sequence[str], path) -> None:
    doc = {
        "schema": list(schema),
        "models": [models[k].to_dict() for k in sorted(models)],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_models(path) -> tuple[dict[tuple[str, str], RegressionModel], list[str]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    models = {}
    for d in doc["models"]:
        model = RegressionModel.from_dict(d)
        models[(model.system_id, model.metric_id)] = model
    return models, doc["schema"]


def write_r2_table(models: Mapping[tuple[str, str], RegressionModel], path) -> None:
    """Rows are metrics; columns are in-sample and cross-validated R^2 per system."""
    systems = [s for s in SYSTEMS if any(k[0] == s for k in models)]
    metrics = [mid for mid in RANKING_METRICS if any(k[1] == mid for k in models)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", *systems, *(f"{s} (cv)" for s in systems)])
    for mid in metrics:
        train = [models[(s, mid)].r2_train if (s, mid) in models else math.nan for s in systems]
        cv = [models[(s, mid)].r2_cv if (s, mid) in models else math.nan for s in systems]
        w.writerow([mid, *(repr(float(v)) for v in train + cv)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
