"""Listening-session segmentation and per-user behaviour features.

Two paths compute the same numbers: ``segment_sessions`` / ``session_features``
/ ``global_features`` work on one user's events and are easy to audit;
``build_feature_matrix`` computes every user at once with array operations.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .corpus import Catalog, EventLog, ListeningEvent
from .errors import DataError

SESSION_GAP = 15 * 60
ATTRIBUTES = ("artist", "song", "album", "genre", "style", "class", "year")
CHANGE_ATTRIBUTES = ("artist", "album", "genre", "style", "class")
SESSION_FEATURES = (
    *(f"repeat_{a}" for a in ATTRIBUTES),
    "exploratoryness",
    "frac_complete",
    "frac_skipped",
    "inactive_frac",
    "mean_listened_frac",
    *(f"change_{a}" for a in CHANGE_ATTRIBUTES),
    "mean_pop_percentile",
    "mean_mainstreamness",
)
WEEKDAYS = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")
OTHER = "other"


@dataclass(frozen=True)
class BehaviorParams:
    gap: int = SESSION_GAP
    skip_seconds: float = 30.0
    complete_fraction: float = 0.95
    exploratory_level: str = "artist"  # or "track"


@dataclass(frozen=True)
class Vocabulary:
    decades: tuple[int, ...]
    classes: tuple[str, ...]
    genres: tuple[str, ...]


@dataclass(frozen=True)
class PopularityTables:
    """Artist percentiles in [0, 1] (1 = most popular): by playcount and by distinct listeners."""

    playcount: dict[str, float]
    listeners: dict[str, float]


@dataclass
class Session:
    user: str
    events: list[ListeningEvent]
    start: int
    end: float


@dataclass
class FeatureMatrix:
    user_ids: list[str]
    values: np.ndarray
    schema: list[str]
    blocks: dict[str, tuple[int, int]] = field(default_factory=dict)

    def row(self, user_id: str) -> np.ndarray:
        return self.values[self.user_ids.index(user_id)]

    def rows(self, user_ids: Sequence[str]) -> np.ndarray:
        pos = {u: i for i, u in enumerate(self.user_ids)}
        return self.values[[pos[u] for u in user_ids]]


def _primary(tags) -> str:
    return min(tags) if tags else ""


def _year(song) -> int:
    return song.release_year if song.release_year is not None else -1


def _decade(year: int) -> int | None:
    return (year // 10) * 10 if year > 0 else None


def _attr(song, name: str):
    if name == "artist":
        return song.artist_id
    if name == "song":
        return song.song_id
    if name == "album":
        return song.album_id
    if name == "genre":
        return _primary(song.genre_tags)
    if name == "style":
        return _primary(song.style_tags)
    if name == "class":
        return _primary(song.class_tags)
    return _year(song)


def _percentiles(values: dict[str, float]) -> dict[str, float]:
    keys = sorted(values)
    if not keys:
        return {}
    if len(keys) == 1:
        return {keys[0]: 1.0}
    ranks = rankdata([values[k] for k in keys], method="average")
    return {k: float((r - 1) / (len(keys) - 1)) for k, r in zip(keys, ranks)}


def popularity_tables(log: EventLog, catalog: Catalog) -> PopularityTables:
    plays: dict[str, float] = {}
    listeners: dict[str, set] = {}
    for u, s in zip(log.user_ids.tolist(), log.song_ids.tolist()):
        a = catalog.artist_of(s)
        if a is None:
            continue
        plays[a] = plays.get(a, 0) + 1
        listeners.setdefault(a, set()).add(u)
    return PopularityTables(_percentiles(plays), _percentiles({a: len(v) for a, v in listeners.items()}))


def build_vocabulary(log: EventLog, catalog: Catalog, users=None) -> Vocabulary:
    """Decades, primary classes and primary genres seen in the given users' plays."""
    keep = set(users) if users is not None else None
    decades, classes, genres = set(), set(), set()
    for u, s in zip(log.user_ids.tolist(), log.song_ids.tolist()):
        if keep is not None and u not in keep:
            continue
        song = catalog.songs.get(s)
        if song is None:
            continue
        d = _decade(_year(song))
        if d is not None:
            decades.add(d)
        if song.class_tags:
            classes.add(_primary(song.class_tags))
        if song.genre_tags:
            genres.add(_primary(song.genre_tags))
    return Vocabulary(tuple(sorted(decades)), tuple(sorted(classes)), tuple(sorted(genres)))


def feature_schema(vocab: Vocabulary) -> tuple[list[str], dict[str, tuple[int, int]]]:
    blocks: list[tuple[str, list[str]]] = [
        ("session_mean", [f"mean:{f}" for f in SESSION_FEATURES]),
        ("session_std", [f"std:{f}" for f in SESSION_FEATURES]),
        ("global_repeat", [f"global:repeat_{a}" for a in ATTRIBUTES]),
        ("decade", [f"decade:{d}" for d in vocab.decades] + [f"decade:{OTHER}"]),
        ("class", [f"class:{c}" for c in vocab.classes] + [f"class:{OTHER}"]),
        ("genre", [f"genre:{g}" for g in vocab.genres] + [f"genre:{OTHER}"]),
        ("hour", [f"hour:{h:02d}" for h in range(24)]),
        ("weekday", [f"weekday:{d}" for d in WEEKDAYS]),
        ("has_data", ["has_data"]),
    ]
    names: list[str] = []
    spans = {}
    for name, cols in blocks:
        spans[name] = (len(names), len(names) + len(cols))
        names.extend(cols)
    return names, spans


# --- per-event quantities shared by both paths ---------------------------------

def _timing(song_duration, listened):
    """(effective duration, effective listened, time actually played)."""
    if song_duration is not None and song_duration > 0:
        d = float(song_duration)
    else:
        d = float(listened) if listened >= 0 else 0.0
    lst = float(listened) if listened >= 0 else d
    played = min(lst, d) if d > 0 else lst
    return d, lst, played


def segment_sessions(events: Sequence[ListeningEvent], catalog: Catalog, gap: float = SESSION_GAP) -> list[Session]:
    """Greedy scan: a new session starts when end-to-start gap exceeds ``gap`` seconds.

    An event ends at start + min(listened, song duration); unknown listened
    duration counts as the full song.
    """
    ordered = sorted(events, key=lambda e: e.timestamp)
    sessions: list[Session] = []
    prev_end = None
    for e in ordered:
        song = catalog.songs.get(e.song_id)
        dur = song.duration if song is not None else None
        _, _, played = _timing(dur, e.listened_duration)
        end = e.timestamp + played
        if prev_end is None or e.timestamp - prev_end > gap:
            sessions.append(Session(e.user_id, [e], e.timestamp, end))
        else:
            sessions[-1].events.append(e)
            sessions[-1].end = end
        prev_end = end
    return sessions


def session_features(
    s: Session,
    catalog: Catalog,
    tables: PopularityTables,
    params: BehaviorParams = BehaviorParams(),
) -> np.ndarray:
    """Feature vector of one session, in ``SESSION_FEATURES`` order."""
    songs = []
    for e in s.events:
        if e.song_id not in catalog:
            raise DataError(f"unresolvable song {e.song_id!r} in session of {s.user!r}")
        songs.append(catalog[e.song_id])
    n = len(songs)
    out = []
    for a in ATTRIBUTES:
        out.append(1.0 - len({_attr(x, a) for x in songs}) / n)
    level = "song" if params.exploratory_level == "track" else "artist"
    out.append(len({_attr(x, level) for x in songs}) / n)
    complete = skipped = 0
    frac_sum = played_sum = 0.0
    max_end = s.events[0].timestamp
    for e, song in zip(s.events, songs):
        d, lst, played = _timing(song.duration, e.listened_duration)
        complete += lst >= params.complete_fraction * d
        skipped += lst < params.skip_seconds
        frac_sum += min(lst, d) / d if d > 0 else 1.0
        played_sum += played
        max_end = max(max_end, e.timestamp + played)
    span = max_end - s.events[0].timestamp
    out.append(complete / n)
    out.append(skipped / n)
    out.append(max(0.0, span - played_sum) / span if span > 0 else 0.0)
    out.append(frac_sum / n)
    for a in CHANGE_ATTRIBUTES:
        if n == 1:
            out.append(0.0)
        else:
            out.append(sum(_attr(x, a) != _attr(y, a) for x, y in zip(songs, songs[1:])) / (n - 1))
    out.append(sum(tables.playcount.get(x.artist_id, 0.0) for x in songs) / n)
    distinct = sorted({x.artist_id for x in songs})
    out.append(sum(tables.listeners.get(a, 0.0) for a in distinct) / len(distinct))
    return np.array(out, dtype=np.float64)


def _weekday(ts: int) -> int:
    return (ts // 86400 + 3) % 7  # 1970-01-01 was a Thursday; Monday = 0


def global_features(events: Sequence[ListeningEvent], catalog: Catalog, vocab: Vocabulary) -> np.ndarray:
    """Whole-history repeat fractions, decade/class/genre distributions, hour and weekday shares."""
    songs = [catalog[e.song_id] for e in events if e.song_id in catalog]
    stamps = [e.timestamp for e in events if e.song_id in catalog]
    n = len(songs)
    size = len(ATTRIBUTES) + len(vocab.decades) + len(vocab.classes) + len(vocab.genres) + 3 + 24 + 7
    if n == 0:
        return np.zeros(size)
    out = [1.0 - len({_attr(x, a) for x in songs}) / n for a in ATTRIBUTES]
    for labels, key in (
        (vocab.decades, lambda x: _decade(_year(x))),
        (vocab.classes, lambda x: _primary(x.class_tags)),
        (vocab.genres, lambda x: _primary(x.genre_tags)),
    ):
        pos = {v: i for i, v in enumerate(labels)}
        hist = np.zeros(len(labels) + 1)
        for x in songs:
            hist[pos.get(key(x), len(labels))] += 1
        out.extend(hist / n)
    hours = np.zeros(24)
    days = np.zeros(7)
    for t in stamps:
        hours[(t // 3600) % 24] += 1
        days[_weekday(t)] += 1
    out.extend(hours / n)
    out.extend(days / n)
    return np.array(out, dtype=np.float64)


def user_feature_vector(
    events: Sequence[ListeningEvent],
    catalog: Catalog,
    tables: PopularityTables,
    vocab: Vocabulary,
    params: BehaviorParams = BehaviorParams(),
) -> np.ndarray:
    """Reference per-user vector: session mean/std, global block, has-data flag."""
    events = [e for e in events if e.song_id in catalog]
    k = len(SESSION_FEATURES)
    g = global_features(events, catalog, vocab)
    if not events:
        return np.concatenate([np.zeros(2 * k), g, [0.0]])
    sessions = segment_sessions(events, catalog, params.gap)
    F = np.vstack([session_features(s, catalog, tables, params) for s in sessions])
    return np.concatenate([F.mean(axis=0), F.std(axis=0), g, [1.0]])


# --- vectorised path -----------------------------------------------------------

class _SongTable:
    """Integer-coded song attributes for array computations."""

    def __init__(self, catalog: Catalog, tables: PopularityTables, vocab: Vocabulary):
        songs = list(catalog)
        self.index = {s.song_id: i for i, s in enumerate(songs)}
        self.codes = {}
        for a in ATTRIBUTES:
            _, self.codes[a] = np.unique(np.array([str(_attr(s, a)) for s in songs], dtype=str),
                                         return_inverse=True)
        self.duration = np.array([s.duration if s.duration else 0 for s in songs], dtype=np.float64)
        self.pop = np.array([tables.playcount.get(s.artist_id, 0.0) for s in songs])
        self.mainstream = np.array([tables.listeners.get(s.artist_id, 0.0) for s in songs])

        def bins(labels, key):
            pos = {v: i for i, v in enumerate(labels)}
            return np.array([pos.get(key(s), len(labels)) for s in songs], dtype=np.int64)

        self.decade_bin = bins(vocab.decades, lambda s: _decade(_year(s)))
        self.class_bin = bins(vocab.classes, lambda s: _primary(s.class_tags))
        self.genre_bin = bins(vocab.genres, lambda s: _primary(s.genre_tags))


def _group_nunique(group: np.ndarray, code: np.ndarray, n_groups: int) -> np.ndarray:
    base = int(code.max()) + 1 if len(code) else 1
    uniq = np.unique(group.astype(np.int64) * base + code)
    return np.bincount(uniq // base, minlength=n_groups).astype(np.float64)


def build_feature_matrix(
    users: Sequence[str],
    log: EventLog,
    catalog: Catalog,
    tables: PopularityTables,
    vocab: Vocabulary,
    params: BehaviorParams = BehaviorParams(),
) -> FeatureMatrix:
    """Feature rows for ``users`` (in the given order); unresolvable events are ignored.

    Session features are summarised by mean and population standard deviation;
    a user without events gets an all-zero row with ``has_data`` = 0.
    """
    schema, blocks = feature_schema(vocab)
    users = list(users)
    upos_of = {u: i for i, u in enumerate(users)}
    n_users = len(users)
    table = _SongTable(catalog, tables, vocab)
    sidx = np.array([table.index.get(s, -1) for s in log.song_ids.tolist()], dtype=np.int64)
    upos = np.array([upos_of.get(u, -1) for u in log.user_ids.tolist()], dtype=np.int64)
    keep = (sidx >= 0) & (upos >= 0)
    sidx, upos = sidx[keep], upos[keep]
    ts, listened = log.timestamps[keep], log.listened[keep].astype(np.float64)
    order = np.argsort(ts, kind="stable")
    order = order[np.argsort(upos[order], kind="stable")]
    sidx, upos, ts, listened = sidx[order], upos[order], ts[order], listened[order]
    n = len(sidx)
    values = np.zeros((n_users, len(schema)))
    if n == 0:
        return FeatureMatrix(users, values, schema, blocks)

    song_d = table.duration[sidx]
    d = np.where(song_d > 0, song_d, np.where(listened >= 0, listened, 0.0))
    lst = np.where(listened >= 0, listened, d)
    played = np.where(d > 0, np.minimum(lst, d), lst)
    end = ts + played

    new = np.ones(n, dtype=bool)
    new[1:] = (upos[1:] != upos[:-1]) | (ts[1:] - end[:-1] > params.gap)
    sid = np.cumsum(new) - 1
    n_sess = int(sid[-1]) + 1
    starts = np.flatnonzero(new)
    size = np.bincount(sid, minlength=n_sess).astype(np.float64)
    codes = {a: table.codes[a][sidx] for a in ATTRIBUTES}

    cols = [1.0 - _group_nunique(sid, codes[a], n_sess) / size for a in ATTRIBUTES]
    level = "song" if params.exploratory_level == "track" else "artist"
    cols.append(_group_nunique(sid, codes[level], n_sess) / size)
    cols.append(np.bincount(sid, lst >= params.complete_fraction * d, n_sess) / size)
    cols.append(np.bincount(sid, lst < params.skip_seconds, n_sess) / size)
    span = np.maximum.reduceat(np.maximum(end, ts), starts) - ts[starts]
    active = np.bincount(sid, played, n_sess)
    with np.errstate(invalid="ignore", divide="ignore"):
        inactive = np.where(span > 0, np.maximum(0.0, span - active) / span, 0.0)
    cols.append(inactive)
    frac = np.where(d > 0, np.minimum(lst, d) / np.where(d > 0, d, 1.0), 1.0)
    cols.append(np.bincount(sid, frac, n_sess) / size)
    same = sid[1:] == sid[:-1]
    for a in CHANGE_ATTRIBUTES:
        c = codes[a]
        changed = (c[1:] != c[:-1]) & same
        cnt = np.bincount(sid[1:], changed, n_sess)
        cols.append(np.where(size > 1, cnt / np.maximum(size - 1, 1), 0.0))
    cols.append(np.bincount(sid, table.pop[sidx], n_sess) / size)
    art = codes["artist"]
    base = int(art.max()) + 1
    uniq = np.unique(sid.astype(np.int64) * base + art)
    usid = uniq // base
    first_song = {}
    for k, a in zip(art.tolist(), sidx.tolist()):
        first_song.setdefault(k, a)
    art_main = np.array([table.mainstream[first_song[k]] for k in (uniq % base).tolist()])
    cols.append(np.bincount(usid, art_main, n_sess) / np.bincount(usid, minlength=n_sess))
    F = np.column_stack(cols)

    suser = upos[starts]
    k = len(SESSION_FEATURES)
    n_s_user = np.bincount(suser, minlength=n_users).astype(np.float64)
    has = n_s_user > 0
    denom = np.where(has, n_s_user, 1.0)
    for j in range(k):
        mean = np.bincount(suser, F[:, j], n_users) / denom
        var = np.bincount(suser, (F[:, j] - mean[suser]) ** 2, n_users) / denom
        values[:, j] = mean
        values[:, k + j] = np.sqrt(var)

    n_ev = np.bincount(upos, minlength=n_users).astype(np.float64)
    ev_denom = np.where(n_ev > 0, n_ev, 1.0)
    lo = blocks["global_repeat"][0]
    for j, a in enumerate(ATTRIBUTES):
        values[:, lo + j] = np.where(has, 1.0 - _group_nunique(upos, codes[a], n_users) / ev_denom, 0.0)

    def hist(block, b):
        lo, hi = blocks[block]
        width = hi - lo
        h = np.bincount(upos * width + b, minlength=n_users * width).reshape(n_users, width)
        values[:, lo:hi] = h / ev_denom[:, None]

    hist("decade", table.decade_bin[sidx])
    hist("class", table.class_bin[sidx])
    hist("genre", table.genre_bin[sidx])
    hist("hour", (ts // 3600) % 24)
    hist("weekday", (ts // 86400 + 3) % 7)
    values[:, blocks["has_data"][0]] = has.astype(np.float64)
    return FeatureMatrix(users, values, schema, blocks)


def write_features(fm: FeatureMatrix, tsv_path: str | Path, schema_path: str | Path | None = None) -> None:
    with open(tsv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("user_id\t" + "\t".join(fm.schema) + "\n")
        for u, row in zip(fm.user_ids, fm.values.tolist()):
            fh.write(u + "\t" + "\t".join(repr(v) for v in row) + "\n")
    if schema_path is not None:
        doc = {"features": fm.schema, "blocks": {k: list(v) for k, v in fm.blocks.items()}}
        Path(schema_path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_features(tsv_path: str | Path, schema_path: str | Path | None = None) -> FeatureMatrix:
    with open(tsv_path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")[1:]
        users, rows = [], []
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            users.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    blocks = {}
    if schema_path is not None and Path(schema_path).exists():
        doc = json.loads(Path(schema_path).read_text(encoding="utf-8"))
        blocks = {k: tuple(v) for k, v in doc["blocks"].items()}
    values = np.array(rows, dtype=np.float64).reshape(len(users), len(header))
    return FeatureMatrix(users, values, header, blocks)
