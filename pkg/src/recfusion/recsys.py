"""Component recommenders: BM25-weighted implicit ALS, popularity and random."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import scipy.sparse as sp

from ._rng import substream

logger = logging.getLogger(__name__)

BLOCK_ROWS = 4096


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 100.0
    b: float = 0.8

    def __post_init__(self):
        if not self.k1 > 0:
            raise ValueError("k1 must be positive")
        if not 0 <= self.b <= 1:
            raise ValueError("b must lie in [0, 1]")


def bm25_weight(counts: sp.spmatrix, params: Bm25Params = Bm25Params()) -> sp.csr_matrix:
    """BM25-weighted copy of a user x item playcount matrix (same sparsity pattern).

    w(u,i) = idf(i) * (k1+1) x / (k1 (1 - b + b len(u)/avg_len) + x)
    with idf(i) = ln(U / (1 + listeners(i))). The idf goes negative for items
    heard by more than half of the users.
    """
    X = sp.csr_matrix(counts, dtype=np.float64, copy=True)
    X.sort_indices()
    if X.nnz == 0:
        raise ValueError("cannot weight an empty matrix")
    n_users = X.shape[0]
    listeners = np.bincount(X.indices, minlength=X.shape[1])
    idf = np.log(n_users / (1.0 + listeners))
    row_len = np.asarray(X.sum(axis=1)).ravel()
    norm = (1.0 - params.b) + params.b * row_len / row_len.mean()
    rows = np.repeat(np.arange(n_users), np.diff(X.indptr))
    x = X.data
    X.data = idf[X.indices] * (params.k1 + 1.0) * x / (params.k1 * norm[rows] + x)
    return X


@dataclass(frozen=True)
class IalsParams:
    factors: int = 20
    regularization: float = 0.1
    epochs: int = 50
    bm25: Bm25Params = Bm25Params()


@dataclass(eq=False)
class FactorModel:
    user_factors: np.ndarray
    item_factors: np.ndarray
    factors: int
    regularization: float
    epochs: int
    loss_trace: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if not (np.all(np.isfinite(self.user_factors)) and np.all(np.isfinite(self.item_factors))):
            raise TrainingError("factor matrices contain non-finite values")

    @property
    def n_users(self) -> int:
        return self.user_factors.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_factors.shape[0]

    def scores(self, user: int) -> np.ndarray:
        return self.item_factors @ self.user_factors[user]

    def save(self, path: str | Path) -> None:
        np.savez(
            path,
            format_version=np.array(1),
            user_factors=self.user_factors,
            item_factors=self.item_factors,
            hyper=np.array([self.factors, self.epochs, self.seed], dtype=np.int64),
            regularization=np.array(self.regularization, dtype=np.float64),
            loss_trace=self.loss_trace,
        )

    @classmethod
    def load(cls, path: str | Path) -> FactorModel:
        with np.load(path) as z:
            if int(z["format_version"]) != 1:
                raise ValueError(f"unsupported model format {int(z['format_version'])}")
            f, epochs, seed = (int(v) for v in z["hyper"])
            return cls(
                z["user_factors"].copy(),
                z["item_factors"].copy(),
                f,
                float(z["regularization"]),
                epochs,
                z["loss_trace"].copy(),
                seed,
            )


def ials_loss(w: sp.csr_matrix, X: np.ndarray, Y: np.ndarray, reg: float) -> float:
    """Confidence-weighted squared error over all user-item pairs plus L2 penalty.

    Unobserved pairs have preference 0 and confidence 1; observed pairs have
    preference 1 and confidence 1 + max(w, 0).
    """
    rows = np.repeat(np.arange(w.shape[0]), np.diff(w.indptr))
    s = np.einsum("ij,ij->i", X[rows], Y[w.indices])
    c = 1.0 + np.maximum(w.data, 0.0)
    all_sq = float(np.sum((X.T @ X) * (Y.T @ Y)))
    observed = float(np.sum(c * (1.0 - s) ** 2 - s**2))
    return all_sq + observed + reg * (float(np.sum(X * X)) + float(np.sum(Y * Y)))


def _triu_outer(Y: np.ndarray, iu, ju) -> np.ndarray:
    return Y[:, iu] * Y[:, ju]


def _solve_block(conf_minus_1, conf, Y, gram_reg, iu, ju, YY):
    f = Y.shape[1]
    flat = np.asarray(conf_minus_1 @ YY)
    A = np.broadcast_to(gram_reg, (flat.shape[0], f, f)).copy()
    A[:, iu, ju] += flat
    lower = iu != ju
    A[:, ju[lower], iu[lower]] += flat[:, lower]
    b = np.asarray(conf @ Y)
    return np.linalg.solve(A, b[:, :, None])[:, :, 0]


def _half_step(w: sp.csr_matrix, Y: np.ndarray, reg: float, workers: int) -> np.ndarray:
    """Solve every row of the left factor exactly with the right factor fixed."""
    f = Y.shape[1]
    iu, ju = np.triu_indices(f)
    YY = _triu_outer(Y, iu, ju)
    gram_reg = Y.T @ Y + reg * np.eye(f)
    conf = w.copy()
    conf.data = 1.0 + np.maximum(w.data, 0.0)
    conf_minus_1 = w.copy()
    conf_minus_1.data = np.maximum(w.data, 0.0)
    n = w.shape[0]
    blocks = [(lo, min(lo + BLOCK_ROWS, n)) for lo in range(0, n, BLOCK_ROWS)]

    def run(block):
        lo, hi = block
        return _solve_block(conf_minus_1[lo:hi], conf[lo:hi], Y, gram_reg, iu, ju, YY)

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(b) for b in blocks]
    return np.vstack(parts) if parts else np.zeros((0, f))


def train_ials(
    w: sp.spmatrix,
    factors: int = 20,
    regularization: float = 0.1,
    epochs: int = 50,
    seed: int = 0,
    workers: int = 1,
    callback: Callable[[int, str, np.ndarray, np.ndarray], None] | None = None,
) -> FactorModel:
    """Alternating least squares for implicit feedback.

    Each epoch solves all user rows with the item factors fixed, then all item
    rows with the user factors fixed. ``callback(epoch, side, solved, fixed)``
    runs after every half-step. Per-row normal matrices use
    Y^T C_u Y = Y^T Y + Y^T (C_u - I) Y, so cost scales with the observed entries.
    """
    if factors < 1 or epochs < 1 or not regularization > 0:
        raise ValueError("need factors >= 1, epochs >= 1 and regularization > 0")
    w = sp.csr_matrix(w, dtype=np.float64)
    w.sort_indices()
    if not np.all(np.isfinite(w.data)):
        raise TrainingError("weights contain non-finite values")
    wt = w.T.tocsr()
    wt.sort_indices()
    rng = substream(seed, "init")
    X = rng.uniform(0.0, 0.01, size=(w.shape[0], factors))
    Y = rng.uniform(0.0, 0.01, size=(w.shape[1], factors))
    trace = []
    for epoch in range(1, epochs + 1):
        try:
            X = _half_step(w, Y, regularization, workers)
            if callback:
                callback(epoch, "user", X, Y)
            Y = _half_step(wt, X, regularization, workers)
            if callback:
                callback(epoch, "item", Y, X)
        except np.linalg.LinAlgError as exc:
            raise TrainingError(f"singular normal matrix in epoch {epoch}: {exc}") from exc
        loss = ials_loss(w, X, Y, regularization)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss in epoch {epoch}")
        trace.append(loss)
        logger.debug("epoch %d loss %.6f", epoch, loss)
    return FactorModel(X, Y, factors, regularization, epochs, np.array(trace), seed)


def fit_svd(train: sp.spmatrix, params: IalsParams = IalsParams(), seed: int = 0, workers: int = 1) -> FactorModel:
    """BM25-weight the training playcounts, then factorize them."""
    return train_ials(bm25_weight(train, params.bm25), params.factors, params.regularization,
                      params.epochs, seed, workers)


def normal_equation_residuals(
    w: sp.spmatrix, solved: np.ndarray, fixed: np.ndarray, reg: float
) -> np.ndarray:
    """Relative residual ||A x - b|| / ||b|| of each row solve, built row by row."""
    w = sp.csr_matrix(w, dtype=np.float64)
    f = fixed.shape[1]
    gram = fixed.T @ fixed
    out = np.zeros(w.shape[0])
    for r in range(w.shape[0]):
        lo, hi = w.indptr[r], w.indptr[r + 1]
        cols, vals = w.indices[lo:hi], w.data[lo:hi]
        c = 1.0 + np.maximum(vals, 0.0)
        Yi = fixed[cols]
        A = gram + (Yi.T * (c - 1.0)) @ Yi + reg * np.eye(f)
        b = Yi.T @ c
        nb = np.linalg.norm(b)
        res = np.linalg.norm(A @ solved[r] - b)
        out[r] = res / nb if nb > 0 else res
    return out


@dataclass(frozen=True)
class RankedList:
    user: int
    items: np.ndarray
    scores: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if len(np.unique(self.items)) != len(self.items):
            raise ValueError("ranked items must be distinct")
        if self.scores is not None and np.any(np.diff(self.scores) > 0):
            raise ValueError("scores must be non-increasing")

    def __len__(self) -> int:
        return len(self.items)


def _exclusion_mask(n_items: int, exclude: Iterable[int]) -> np.ndarray:
    keep = np.ones(n_items, dtype=bool)
    ex = np.fromiter(exclude, dtype=np.int64) if not isinstance(exclude, np.ndarray) else exclude
    keep[ex] = False
    return keep


def _top_by_score(scores: np.ndarray, k: int | None, exclude) -> tuple[np.ndarray, np.ndarray]:
    keep = _exclusion_mask(len(scores), exclude)
    idx = np.flatnonzero(keep)
    order = idx[np.lexsort((idx, -scores[idx]))]
    if k is not None:
        order = order[:k]
    return order, scores[order]


def recommend_factors(model: FactorModel, user: int, k: int | None = None, exclude=()) -> RankedList:
    """Top-k items by dot product; ties by ascending item index. ``k=None`` ranks all."""
    if k is not None and k < 1:
        raise ValueError("k must be >= 1")
    items, scores = _top_by_score(model.scores(user), k, exclude)
    return RankedList(user, items, scores)


def item_popularity(train: sp.spmatrix, by: str = "playcount") -> np.ndarray:
    """Global popularity: summed playcounts, or distinct listeners with ``by='listeners'``."""
    train = sp.csr_matrix(train)
    if by == "playcount":
        return np.asarray(train.sum(axis=0)).ravel().astype(np.float64)
    if by == "listeners":
        return np.bincount(train.indices, minlength=train.shape[1]).astype(np.float64)
    raise ValueError(f"unknown popularity mode {by!r}")


def popularity_rank(train, user: int, k: int | None = None, exclude=(), by: str = "playcount") -> RankedList:
    """Same global ordering for every user, minus the excluded items.

    ``train`` is either a playcount matrix or a precomputed popularity vector.
    """
    pop = np.asarray(train, dtype=np.float64) if isinstance(train, np.ndarray) else item_popularity(train, by)
    if k is not None and k < 1:
        raise ValueError("k must be >= 1")
    items, scores = _top_by_score(pop, k, exclude)
    return RankedList(user, items, scores)


def random_rank(n_items: int, user: int, k: int | None = None, exclude=(), seed: int = 0) -> RankedList:
    """Seeded uniform shuffle of the non-excluded items, deterministic per (user, seed)."""
    candidates = np.flatnonzero(_exclusion_mask(n_items, exclude))
    items = substream(seed, "random", user).permutation(candidates)
    return RankedList(user, items[:k] if k is not None else items)


class FactorRecommender:
    name = "SVD-I"

    def __init__(self, model: FactorModel):
        self.model = model

    def rank(self, user: int, k: int | None = None, exclude=()) -> RankedList:
        return recommend_factors(self.model, user, k, exclude)


class PopularityRecommender:
    name = "POP"

    def __init__(self, popularity: np.ndarray):
        self.popularity = np.asarray(popularity, dtype=np.float64)

    @classmethod
    def fit(cls, train: sp.spmatrix, by: str = "playcount") -> PopularityRecommender:
        return cls(item_popularity(train, by))

    def rank(self, user: int, k: int | None = None, exclude=()) -> RankedList:
        return popularity_rank(self.popularity, user, k, exclude)


class RandomRecommender:
    name = "RANDOM"

    def __init__(self, n_items: int, seed: int = 0):
        self.n_items = n_items
        self.seed = seed

    def rank(self, user: int, k: int | None = None, exclude=()) -> RankedList:
        return random_rank(self.n_items, user, k, exclude, self.seed)


def write_recommendations(lists: Iterable[RankedList], user_ids, artist_ids, path: str | Path) -> None:
    """``recommendations.tsv``: user_id, 1-based rank, artist_id, score."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("user_id\trank\tartist_id\tscore\n")
        for rl in lists:
            scores = rl.scores if rl.scores is not None else [float("nan")] * len(rl.items)
            for r, (item, s) in enumerate(zip(rl.items.tolist(), np.asarray(scores).tolist()), start=1):
                fh.write(f"{user_ids[rl.user]}\t{r}\t{artist_ids[item]}\t{s!r}\n")
