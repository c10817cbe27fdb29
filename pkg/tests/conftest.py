from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp

from recfusion.corpus import Catalog, EventLog, PlaycountMatrix, SongMeta


def make_matrix(counts) -> PlaycountMatrix:
    """PlaycountMatrix from a dense array with ids u0.. and a0.. (zero-padded so sorting keeps order)."""
    dense = np.asarray(counts)
    users = tuple(f"u{i:04d}" for i in range(dense.shape[0]))
    artists = tuple(f"a{j:04d}" for j in range(dense.shape[1]))
    m = sp.csr_matrix(dense, dtype=np.int64)
    m.sort_indices()
    return PlaycountMatrix(users, artists, m)


def random_counts(rng, n_users, n_items, density=0.2, max_count=30):
    dense = np.where(rng.random((n_users, n_items)) < density, rng.integers(1, max_count, (n_users, n_items)), 0)
    dense[np.arange(n_users), rng.integers(0, n_items, n_users)] += 1  # no empty rows
    return dense


def song(song_id, artist, album="al1", year=2001, duration=200, genres=("rock",), styles=("indie",),
         classes=("k-pop",)) -> SongMeta:
    return SongMeta(song_id, artist, album, year, duration, frozenset(genres), frozenset(styles), frozenset(classes))


@pytest.fixture
def tiny_catalog() -> Catalog:
    return Catalog([
        song("s1", "a1", "al1", 1995, 200, ("rock",), ("indie",), ("k-pop",)),
        song("s2", "a1", "al1", 1995, 180, ("rock",), ("indie",), ("k-pop",)),
        song("s3", "a2", "al2", 2012, 240, ("jazz", "blues"), ("bebop",), ("ballad",)),
        song("s4", "a3", "al3", None, None, (), (), ()),
        song("s5", "a3", "al4", 2018, 100, ("pop",), ("dance",), ("k-pop",)),
    ])


@pytest.fixture
def tiny_log() -> EventLog:
    t0 = 1_600_000_000
    rows = [
        ("u1", "s1", t0, 200), ("u1", "s2", t0 + 200, 10), ("u1", "s3", t0 + 215, -1),
        ("u1", "s1", t0 + 5000, 200), ("u1", "s5", t0 + 5200, 95),
        ("u2", "s3", t0 + 100, 240), ("u2", "s4", t0 + 400, 60), ("u2", "s4", t0 + 2000, -1),
        ("u3", "s5", t0 + 50, 100),
    ]
    return EventLog(*(np.array(c) for c in zip(*rows)))


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[n])
