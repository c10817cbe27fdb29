"""Listening-event ingestion, artist-level playcounts and the experimental split."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, TextIO

import numpy as np
import scipy.sparse as sp

from ._rng import substream
from .errors import DataError, ParseError

EVENTS_HEADER = ("user_id", "song_id", "timestamp", "listened_duration")
SONGS_HEADER = ("song_id", "artist_id", "album_id", "year", "duration", "genres", "styles", "classes")
DEFAULT_MIN_LISTENERS = 30


@dataclass(frozen=True)
class ListeningEvent:
    user_id: str
    song_id: str
    timestamp: int
    listened_duration: int = -1  # -1 = unknown


@dataclass(frozen=True)
class SongMeta:
    song_id: str
    artist_id: str
    album_id: str = ""
    release_year: int | None = None
    duration: int | None = None
    genre_tags: frozenset[str] = frozenset()
    style_tags: frozenset[str] = frozenset()
    class_tags: frozenset[str] = frozenset()


class EventLog:
    """Column-oriented event log; iterating yields ``ListeningEvent`` objects."""

    def __init__(self, user_ids, song_ids, timestamps, listened):
        self.user_ids = np.asarray(user_ids, dtype=str)
        self.song_ids = np.asarray(song_ids, dtype=str)
        self.timestamps = np.asarray(timestamps, dtype=np.int64)
        self.listened = np.asarray(listened, dtype=np.int64)
        n = len(self.user_ids)
        if not (len(self.song_ids) == len(self.timestamps) == len(self.listened) == n):
            raise ValueError("event columns differ in length")

    @classmethod
    def from_events(cls, events: Iterable[ListeningEvent]) -> EventLog:
        events = list(events)
        return cls(
            [e.user_id for e in events],
            [e.song_id for e in events],
            [e.timestamp for e in events],
            [e.listened_duration for e in events],
        )

    def __len__(self) -> int:
        return len(self.user_ids)

    def __getitem__(self, i: int) -> ListeningEvent:
        return ListeningEvent(
            str(self.user_ids[i]), str(self.song_ids[i]), int(self.timestamps[i]), int(self.listened[i])
        )

    def __iter__(self) -> Iterator[ListeningEvent]:
        for i in range(len(self)):
            yield self[i]

    def take(self, index) -> EventLog:
        return EventLog(self.user_ids[index], self.song_ids[index], self.timestamps[index], self.listened[index])


class Catalog:
    """Song metadata keyed by song id."""

    def __init__(self, songs: Iterable[SongMeta]):
        self.songs: dict[str, SongMeta] = {}
        for s in songs:
            if s.song_id in self.songs:
                raise DataError(f"duplicate song_id {s.song_id!r} in catalog")
            if s.duration is not None and s.duration <= 0:
                raise DataError(f"song {s.song_id!r}: duration must be positive")
            self.songs[s.song_id] = s

    def __len__(self) -> int:
        return len(self.songs)

    def __contains__(self, song_id) -> bool:
        return song_id in self.songs

    def __getitem__(self, song_id: str) -> SongMeta:
        return self.songs[song_id]

    def __iter__(self) -> Iterator[SongMeta]:
        return iter(self.songs.values())

    def artist_of(self, song_id: str) -> str | None:
        s = self.songs.get(song_id)
        return None if s is None else s.artist_id


def _lines(stream) -> Iterable[str]:
    if isinstance(stream, (str, Path)):
        with open(stream, encoding="utf-8", newline="") as fh:
            yield from fh
    else:
        yield from stream


def _check_header(line: str, expected: tuple[str, ...]) -> None:
    got = tuple(line.rstrip("\r\n").split("\t"))
    if got != expected:
        raise ParseError(1, f"expected header {'<TAB>'.join(expected)!r}, got {line.rstrip()!r}")


def parse_events(stream: str | Path | TextIO | Iterable[str]) -> EventLog:
    """Parse ``events.tsv``. Errors carry the 1-based physical line number."""
    users, songs, stamps, listened = [], [], [], []
    it = iter(_lines(stream))
    header = next(it, None)
    if header is None or not header.strip():
        return EventLog([], [], [], [])
    _check_header(header, EVENTS_HEADER)
    for line_no, line in enumerate(it, start=2):
        line = line.rstrip("\r\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) not in (3, 4):
            raise ParseError(line_no, f"expected 4 tab-separated fields, got {len(parts)}")
        user, song, ts = parts[0], parts[1], parts[2]
        if not user or not song:
            raise ParseError(line_no, "empty user_id or song_id")
        try:
            t = int(ts)
            d = int(parts[3]) if len(parts) == 4 and parts[3] != "" else -1
        except ValueError:
            raise ParseError(line_no, f"non-integer timestamp or duration in {line!r}") from None
        if t < 0:
            raise ParseError(line_no, f"negative timestamp {t}")
        if d < -1:
            raise ParseError(line_no, f"invalid listened_duration {d}")
        users.append(user)
        songs.append(song)
        stamps.append(t)
        listened.append(d)
    return EventLog(users, songs, stamps, listened)


def _tags(s: str) -> frozenset[str]:
    return frozenset(t for t in s.split("|") if t)


def parse_songs(stream: str | Path | TextIO | Iterable[str]) -> Catalog:
    """Parse ``songs.tsv`` (tag columns are ``|``-separated)."""
    songs = []
    it = iter(_lines(stream))
    header = next(it, None)
    if header is None or not header.strip():
        return Catalog([])
    _check_header(header, SONGS_HEADER)
    for line_no, line in enumerate(it, start=2):
        line = line.rstrip("\r\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != len(SONGS_HEADER):
            raise ParseError(line_no, f"expected {len(SONGS_HEADER)} fields, got {len(parts)}")
        song, artist, album, year, dur, genres, styles, classes = parts
        if not song or not artist:
            raise ParseError(line_no, "empty song_id or artist_id")
        try:
            y = int(year) if year not in ("", "-1") else None
            d = int(dur) if dur not in ("", "-1") else None
        except ValueError:
            raise ParseError(line_no, f"non-integer year or duration in {line!r}") from None
        if d is not None and d <= 0:
            raise ParseError(line_no, f"non-positive duration {d}")
        songs.append(SongMeta(song, artist, album, y, d, _tags(genres), _tags(styles), _tags(classes)))
    try:
        return Catalog(songs)
    except DataError as exc:
        raise ParseError(0, str(exc)) from None


def write_events(log: EventLog, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(EVENTS_HEADER) + "\n")
        for u, s, t, d in zip(log.user_ids, log.song_ids, log.timestamps.tolist(), log.listened.tolist()):
            fh.write(f"{u}\t{s}\t{t}\t{d}\n")


def write_songs(catalog: Catalog, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(SONGS_HEADER) + "\n")
        for s in catalog:
            fh.write(
                "\t".join(
                    [
                        s.song_id,
                        s.artist_id,
                        s.album_id,
                        "" if s.release_year is None else str(s.release_year),
                        "" if s.duration is None else str(s.duration),
                        "|".join(sorted(s.genre_tags)),
                        "|".join(sorted(s.style_tags)),
                        "|".join(sorted(s.class_tags)),
                    ]
                )
                + "\n"
            )


@dataclass(frozen=True, eq=False)
class PlaycountMatrix:
    """Sparse user x artist playcounts with dense, sorted id interning.

    ``counts`` is a canonical CSR matrix (sorted indices, no duplicates). Entry
    ``k`` refers to position ``k`` of ``counts.data``.
    """

    user_ids: tuple[str, ...]
    artist_ids: tuple[str, ...]
    counts: sp.csr_matrix
    _user_pos: dict = field(init=False, repr=False, compare=False)
    _artist_pos: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        c = self.counts
        if c.shape != (len(self.user_ids), len(self.artist_ids)):
            raise ValueError("index sizes do not match matrix shape")
        if c.nnz and c.data.min() < 1:
            raise ValueError("playcounts must be positive")
        object.__setattr__(self, "_user_pos", {u: i for i, u in enumerate(self.user_ids)})
        object.__setattr__(self, "_artist_pos", {a: i for i, a in enumerate(self.artist_ids)})

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_artists(self) -> int:
        return len(self.artist_ids)

    @property
    def nnz(self) -> int:
        return self.counts.nnz

    def user_row(self, user_id: str) -> int:
        return self._user_pos[user_id]

    def artist_col(self, artist_id: str) -> int:
        return self._artist_pos[artist_id]

    def entry(self, user_id: str, artist_id: str) -> int:
        return int(self.counts[self.user_row(user_id), self.artist_col(artist_id)])

    def entry_rows(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_users), np.diff(self.counts.indptr))

    def row_items(self, row: int) -> np.ndarray:
        c = self.counts
        return c.indices[c.indptr[row] : c.indptr[row + 1]]

    def select(self, keep: np.ndarray) -> sp.csr_matrix:
        """CSR of the same shape holding only entries where ``keep`` is true."""
        keep = np.asarray(keep, dtype=bool)
        rows = self.entry_rows()[keep]
        m = sp.csr_matrix(
            (self.counts.data[keep], (rows, self.counts.indices[keep])), shape=self.counts.shape
        )
        m.sort_indices()
        return m

    def listeners(self) -> np.ndarray:
        return np.bincount(self.counts.indices, minlength=self.n_artists)

    def total_playcount(self) -> int:
        return int(self.counts.data.sum())

    def save(self, path: str | Path) -> None:
        c = self.counts
        np.savez(
            path,
            user_ids=np.asarray(self.user_ids, dtype=str),
            artist_ids=np.asarray(self.artist_ids, dtype=str),
            indptr=c.indptr,
            indices=c.indices,
            data=c.data,
        )

    @classmethod
    def load(cls, path: str | Path) -> PlaycountMatrix:
        with np.load(path) as z:
            users = tuple(z["user_ids"].tolist())
            artists = tuple(z["artist_ids"].tolist())
            counts = sp.csr_matrix((z["data"], z["indices"], z["indptr"]), shape=(len(users), len(artists)))
        return cls(users, artists, counts)


def _from_triples(users: np.ndarray, artists: np.ndarray) -> PlaycountMatrix:
    """Aggregate one (user, artist) pair per event into counts."""
    if len(users) == 0:
        return PlaycountMatrix((), (), sp.csr_matrix((0, 0), dtype=np.int64))
    user_ids, u = np.unique(users, return_inverse=True)
    artist_ids, a = np.unique(artists, return_inverse=True)
    m = sp.csr_matrix(
        (np.ones(len(u), dtype=np.int64), (u, a)), shape=(len(user_ids), len(artist_ids))
    )
    m.sum_duplicates()
    m.sort_indices()
    return PlaycountMatrix(tuple(user_ids.tolist()), tuple(artist_ids.tolist()), m)


def build_playcounts(log: EventLog, catalog: Catalog) -> tuple[PlaycountMatrix, int]:
    """Artist-level playcounts; returns the matrix and the number of dropped events."""
    artist_of = {s.song_id: s.artist_id for s in catalog}
    artists = np.array([artist_of.get(s, "") for s in log.song_ids.tolist()], dtype=str)
    ok = artists != "" if len(artists) else np.zeros(0, dtype=bool)
    dropped = int(len(log) - ok.sum())
    return _from_triples(log.user_ids[ok], artists[ok]), dropped


def filter_min_listeners(m: PlaycountMatrix, min_listeners: int = DEFAULT_MIN_LISTENERS) -> PlaycountMatrix:
    """Drop artists with fewer than ``min_listeners`` distinct users, then empty users."""
    if min_listeners < 1:
        raise ValueError("min_listeners must be >= 1")
    keep_cols = np.flatnonzero(m.listeners() >= min_listeners)
    sub = m.counts[:, keep_cols].tocsr()
    keep_rows = np.flatnonzero(np.diff(sub.indptr) > 0)
    sub = sub[keep_rows].tocsr()
    if sub.nnz == 0:
        raise DataError("catalog empty after filtering")
    sub.sort_indices()
    return PlaycountMatrix(
        tuple(m.user_ids[i] for i in keep_rows), tuple(m.artist_ids[j] for j in keep_cols), sub
    )


def hidden_count(n_entries: int, hidden_frac: float) -> int:
    """Entries to hide for one user: at least one when there are two or more, never all."""
    if n_entries < 2:
        return 0
    return min(max(int(math.floor(hidden_frac * n_entries + 0.5)), 1), n_entries - 1)


@dataclass(frozen=True, eq=False)
class SplitPlan:
    """User roles plus boolean masks over the matrix entries (CSR order)."""

    users_train: np.ndarray
    users_test: np.ndarray
    users_reg: np.ndarray
    test_visible: np.ndarray
    test_hidden: np.ndarray
    reg_train: np.ndarray
    reg_test: np.ndarray
    seed: int
    fractions: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, SplitPlan):
            return NotImplemented
        names = ("users_train", "users_test", "users_reg", "test_visible", "test_hidden", "reg_train", "reg_test")
        return self.seed == other.seed and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in names
        )

    def main_training(self, m: PlaycountMatrix) -> sp.csr_matrix:
        """Users-Train in full plus the visible part of Users-Test."""
        return m.select(~self.test_hidden)

    def counterpart_training(self, m: PlaycountMatrix) -> sp.csr_matrix:
        """Everything except Users-Reg-Test."""
        return m.select(~self.reg_test)

    def to_json(self, m: PlaycountMatrix) -> str:
        rows, cols = m.entry_rows(), m.counts.indices

        def grouped(mask):
            out: dict[str, list[str]] = {}
            for r, c in zip(rows[mask].tolist(), cols[mask].tolist()):
                out.setdefault(m.user_ids[r], []).append(m.artist_ids[c])
            return {k: sorted(v) for k, v in out.items()}

        doc = {
            "seed": int(self.seed),
            "fractions": {k: float(v) for k, v in self.fractions.items()},
            "users_train": sorted(m.user_ids[i] for i in self.users_train),
            "users_test": sorted(m.user_ids[i] for i in self.users_test),
            "users_reg": sorted(m.user_ids[i] for i in self.users_reg),
            "test_hidden": grouped(self.test_hidden),
            "reg_test": grouped(self.reg_test),
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str, m: PlaycountMatrix) -> SplitPlan:
        doc = json.loads(text)
        try:
            rows_of = lambda ids: np.array(sorted(m.user_row(u) for u in ids), dtype=np.int64)  # noqa: E731
            train, test, reg = rows_of(doc["users_train"]), rows_of(doc["users_test"]), rows_of(doc["users_reg"])
            entry_rows, cols = m.entry_rows(), m.counts.indices
            index = {(r, c): k for k, (r, c) in enumerate(zip(entry_rows.tolist(), cols.tolist()))}

            def mask_of(groups):
                mask = np.zeros(m.nnz, dtype=bool)
                for u, artists in groups.items():
                    r = m.user_row(u)
                    for a in artists:
                        mask[index[(r, m.artist_col(a))]] = True
                return mask

            hidden, reg_test = mask_of(doc["test_hidden"]), mask_of(doc["reg_test"])
        except KeyError as exc:
            raise DataError(f"split does not match playcount matrix: unknown id {exc}") from None
        in_test = np.isin(entry_rows, test)
        in_reg = np.isin(entry_rows, reg)
        return cls(train, test, reg, in_test & ~hidden, hidden, in_reg & ~reg_test, reg_test,
                   doc["seed"], doc.get("fractions", {}))


def _partition(m: PlaycountMatrix, users: np.ndarray, frac: float, rng: np.random.Generator):
    hidden = np.zeros(m.nnz, dtype=bool)
    member = np.zeros(m.nnz, dtype=bool)
    indptr = m.counts.indptr
    for u in users.tolist():
        lo, hi = indptr[u], indptr[u + 1]
        member[lo:hi] = True
        k = hidden_count(hi - lo, frac)
        if k:
            hidden[lo + rng.permutation(hi - lo)[:k]] = True
    return member & ~hidden, hidden


def make_split(
    m: PlaycountMatrix,
    test_frac: float = 0.10,
    reg_frac: float = 0.10,
    hidden_frac: float = 0.15,
    seed: int = 0,
) -> SplitPlan:
    """Assign users to Train/Test/Reg and hide a fraction of each selected user's entries.

    ``reg_frac`` is relative to the total user count, so equal fractions give
    equally sized test and regression groups.
    """
    for name, v in (("test_frac", test_frac), ("reg_frac", reg_frac), ("hidden_frac", hidden_frac)):
        if not 0 < v < 1:
            raise ValueError(f"{name} must lie in (0, 1), got {v}")
    rng = substream(seed, "split")
    n = m.n_users
    n_test = int(math.floor(test_frac * n + 0.5))
    if n_test == 0 or n_test >= n:
        raise DataError(f"split leaves an empty user set ({n} users, test_frac={test_frac})")
    perm = rng.permutation(n)
    test = np.sort(perm[:n_test])
    train = np.sort(perm[n_test:])
    n_reg = min(int(math.floor(reg_frac * n + 0.5)), len(train))
    if n_reg == 0:
        raise DataError("split leaves no regression users")
    reg = np.sort(rng.choice(train, size=n_reg, replace=False))
    visible, hidden = _partition(m, test, hidden_frac, rng)
    reg_train, reg_test = _partition(m, reg, hidden_frac, rng)
    fractions = {"test_frac": test_frac, "reg_frac": reg_frac, "hidden_frac": hidden_frac}
    return SplitPlan(train, test, reg, visible, hidden, reg_train, reg_test, seed, fractions)


def class_summary(log: EventLog, catalog: Catalog) -> list[tuple[str, float, int]]:
    """Per class tag: average plays per listener and number of songs.

    Songs without class tags are grouped under ``untagged``; multi-tag songs
    count toward each of their tags.
    """
    songs_per: Counter = Counter()
    for s in catalog:
        for tag in s.class_tags or ("untagged",):
            songs_per[tag] += 1
    plays: Counter = Counter()
    listeners: dict[str, set] = {}
    for u, song in zip(log.user_ids.tolist(), log.song_ids.tolist()):
        meta = catalog.songs.get(song)
        if meta is None:
            continue
        for tag in meta.class_tags or ("untagged",):
            plays[tag] += 1
            listeners.setdefault(tag, set()).add(u)
    rows = []
    for tag in sorted(songs_per):
        n_listeners = len(listeners.get(tag, ()))
        rows.append((tag, plays[tag] / n_listeners if n_listeners else 0.0, songs_per[tag]))
    return rows


def write_class_summary(rows, path: str | Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "avg_plays_per_listener", "n_songs"])
    for tag, avg, n in rows:
        w.writerow([tag, repr(float(avg)), n])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
