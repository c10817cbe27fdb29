import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from recfusion import recsys
from recfusion.recsys import (
    Bm25Params,
    FactorModel,
    FactorRecommender,
    IalsParams,
    PopularityRecommender,
    RandomRecommender,
    RankedList,
    TrainingError,
    bm25_weight,
    fit_svd,
    ials_loss,
    item_popularity,
    normal_equation_residuals,
    popularity_rank,
    random_rank,
    recommend_factors,
    train_ials,
    write_recommendations,
)

import oracles
from conftest import random_counts


def _rows(dense):
    return [{j: float(v) for j, v in enumerate(r) if v} for r in dense]


@pytest.mark.parametrize("k1,b", [(100.0, 0.8), (1.2, 0.75), (5.0, 0.0), (50.0, 1.0)])
def test_bm25_matches_scalar_loop(k1, b):
    dense = random_counts(np.random.default_rng(4), 30, 12, density=0.4)
    got = bm25_weight(sp.csr_matrix(dense), Bm25Params(k1, b)).toarray()
    want = oracles.bm25(_rows(dense), 12, k1, b)
    for u, row in enumerate(want):
        for j in range(12):
            assert got[u, j] == pytest.approx(row.get(j, 0.0), abs=1e-12)


def test_bm25_keeps_sparsity_pattern():
    dense = random_counts(np.random.default_rng(0), 20, 10)
    w = bm25_weight(sp.csr_matrix(dense))
    assert w.nnz == np.count_nonzero(dense)


def test_bm25_params_validated():
    with pytest.raises(ValueError):
        Bm25Params(k1=0)
    with pytest.raises(ValueError):
        Bm25Params(b=1.5)


def test_loss_matches_dense_brute_force():
    rng = np.random.default_rng(3)
    w = sp.csr_matrix(rng.normal(size=(7, 5)) * (rng.random((7, 5)) < 0.5))
    X, Y = rng.normal(size=(7, 3)), rng.normal(size=(5, 3))
    dense = w.toarray()
    mask = np.zeros_like(dense, dtype=bool)
    mask[w.nonzero()] = True
    total = 0.0
    for u in range(7):
        for i in range(5):
            p = 1.0 if mask[u, i] else 0.0
            c = 1.0 + max(dense[u, i], 0.0) if mask[u, i] else 1.0
            total += c * (p - X[u] @ Y[i]) ** 2
    total += 0.3 * (np.sum(X**2) + np.sum(Y**2))
    assert ials_loss(w, X, Y, 0.3) == pytest.approx(total, rel=1e-12)


def test_one_by_one_half_step_closed_form():
    w = sp.csr_matrix(np.array([[4.0]]))
    steps = []
    train_ials(w, factors=1, regularization=0.5, epochs=2, seed=1,
               callback=lambda e, side, solved, fixed: steps.append((solved.copy(), fixed.copy())))
    c = 5.0
    for solved, fixed in steps:
        y = fixed[0, 0]
        assert solved[0, 0] == pytest.approx(c * y / (c * y * y + 0.5), rel=1e-12)


def test_half_steps_solve_dense_normal_equations():
    rng = np.random.default_rng(8)
    w = bm25_weight(sp.csr_matrix(random_counts(rng, 40, 15, density=0.3)))
    dense = w.toarray()
    observed = np.zeros_like(dense, dtype=bool)
    observed[w.nonzero()] = True

    def check(epoch, side, solved, fixed):
        W = dense if side == "user" else dense.T
        O = observed if side == "user" else observed.T
        for r in range(W.shape[0]):
            c = np.where(O[r], 1.0 + np.maximum(W[r], 0.0), 1.0)
            A = fixed.T @ np.diag(c) @ fixed + 0.1 * np.eye(fixed.shape[1])
            b = fixed.T @ (c * O[r])
            np.testing.assert_allclose(solved[r], np.linalg.solve(A, b), rtol=1e-8, atol=1e-12)

    train_ials(w, factors=4, regularization=0.1, epochs=3, seed=0, callback=check)


def test_loss_is_non_increasing():
    w = bm25_weight(sp.csr_matrix(random_counts(np.random.default_rng(2), 120, 40)))
    m = train_ials(w, factors=6, epochs=25, seed=3)
    trace = m.loss_trace
    assert np.all(trace[1:] <= trace[:-1] * (1 + 1e-9))


def test_workers_do_not_change_factors(monkeypatch):
    monkeypatch.setattr(recsys, "BLOCK_ROWS", 16)
    w = bm25_weight(sp.csr_matrix(random_counts(np.random.default_rng(5), 90, 30)))
    a = train_ials(w, factors=5, epochs=4, seed=2, workers=1)
    b = train_ials(w, factors=5, epochs=4, seed=2, workers=3)
    assert np.array_equal(a.user_factors, b.user_factors)
    assert np.array_equal(a.item_factors, b.item_factors)


def test_seed_controls_initialisation():
    w = bm25_weight(sp.csr_matrix(random_counts(np.random.default_rng(5), 30, 10)))
    a, b = train_ials(w, 3, epochs=2, seed=1), train_ials(w, 3, epochs=2, seed=1)
    c = train_ials(w, 3, epochs=2, seed=2)
    assert np.array_equal(a.user_factors, b.user_factors)
    assert not np.array_equal(a.user_factors, c.user_factors)


def test_non_finite_weights_raise():
    w = sp.csr_matrix(np.array([[1.0, np.nan], [0.0, 2.0]]))
    with pytest.raises(TrainingError):
        train_ials(w, 2, epochs=1)


def test_residual_helper_agrees_with_solver():
    w = bm25_weight(sp.csr_matrix(random_counts(np.random.default_rng(1), 50, 20)))
    last = {}
    train_ials(w, 4, 0.1, 5, seed=0, callback=lambda e, s, x, y: last.update({s: (x.copy(), y.copy())}))
    X, Y_old = last["user"]
    assert normal_equation_residuals(w, X, Y_old, 0.1).max() < 1e-10
    Y, X_new = last["item"]
    assert normal_equation_residuals(w.T.tocsr(), Y, X_new, 0.1).max() < 1e-10


def test_model_save_load_bit_exact(tmp_path):
    w = sp.csr_matrix(random_counts(np.random.default_rng(1), 25, 9))
    m = fit_svd(w, IalsParams(factors=3, epochs=3), seed=4)
    m.save(tmp_path / "m.npz")
    back = FactorModel.load(tmp_path / "m.npz")
    assert np.array_equal(back.user_factors, m.user_factors)
    assert np.array_equal(back.item_factors, m.item_factors)
    assert np.array_equal(back.loss_trace, m.loss_trace)
    assert (back.factors, back.epochs, back.seed, back.regularization) == (3, 3, 4, m.regularization)


def _model(X, Y):
    return FactorModel(np.asarray(X, float), np.asarray(Y, float), 1, 0.1, 1, np.zeros(1))


def test_recommend_ties_break_by_index_and_exclusion():
    m = _model([[1.0]], [[0.5], [2.0], [0.5], [2.0], [1.0]])
    rl = recommend_factors(m, 0, exclude=[3])
    assert rl.items.tolist() == [1, 4, 0, 2]
    assert recommend_factors(m, 0, k=2).items.tolist() == [1, 3]


def test_ranked_list_validation():
    with pytest.raises(ValueError):
        RankedList(0, np.array([1, 1]))
    with pytest.raises(ValueError):
        RankedList(0, np.array([1, 2]), np.array([0.1, 0.2]))


def test_popularity_modes():
    train = sp.csr_matrix(np.array([[5, 1, 0], [0, 1, 0], [0, 1, 9]]))
    assert item_popularity(train).tolist() == [5.0, 3.0, 9.0]
    assert item_popularity(train, "listeners").tolist() == [1.0, 3.0, 1.0]
    assert popularity_rank(train, 0).items.tolist() == [2, 0, 1]
    assert popularity_rank(train, 0, by="listeners").items.tolist() == [1, 0, 2]
    pop = PopularityRecommender.fit(train)
    assert pop.rank(0, exclude=[2]).items.tolist() == [0, 1]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(0, 10_000), st.integers(0, 100))
def test_random_rank_is_a_seeded_permutation(n, seed, user):
    exclude = list(range(0, n, 3))
    a = random_rank(n, user, exclude=exclude, seed=seed)
    assert sorted(a.items.tolist()) == [i for i in range(n) if i not in exclude]
    assert np.array_equal(a.items, random_rank(n, user, exclude=exclude, seed=seed).items)


def test_recommenders_share_interface(tmp_path):
    w = sp.csr_matrix(random_counts(np.random.default_rng(1), 20, 8))
    recs = [FactorRecommender(fit_svd(w, IalsParams(factors=2, epochs=2))), PopularityRecommender.fit(w),
            RandomRecommender(8, seed=1)]
    assert [r.name for r in recs] == ["SVD-I", "POP", "RANDOM"]
    for r in recs:
        assert len(r.rank(3, k=5, exclude=[0])) == 5
    lists = [recs[0].rank(u, k=3) for u in range(2)]
    write_recommendations(lists, [f"u{i}" for i in range(20)], [f"a{j}" for j in range(8)], tmp_path / "r.tsv")
    lines = (tmp_path / "r.tsv").read_text().splitlines()
    assert lines[0] == "user_id\trank\tartist_id\tscore" and len(lines) == 7
    assert lines[1].split("\t")[:2] == ["u0", "1"]
