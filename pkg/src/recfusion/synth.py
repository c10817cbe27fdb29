"""Popularity-biased synthetic listening corpus with session structure."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ._rng import substream
from .corpus import Catalog, EventLog, SongMeta, write_events, write_songs
from .errors import ConfigError

EPOCH_START = 1518652800  # 2018-02-15 00:00 UTC


@dataclass(frozen=True)
class SynthSpec:
    n_users: int = 2000
    n_artists: int = 500
    n_genres: int = 8
    n_styles: int = 12
    n_classes: int = 6
    zipf_exponent: float = 1.1
    taste_dim: int = 4
    taste_weight: float = 1.0
    taste_sharpness: float = 8.0
    taste_pop_bias: float = 1.2
    mix_beta: tuple[float, float] = (0.3, 0.3)
    events_per_user: tuple[int, int] = (40, 240)
    session_length_mean: float = 8.0
    days: int = 30
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.events_per_user
        if not self.zipf_exponent > 0:
            raise ConfigError("zipf_exponent must be positive")
        if self.n_artists < self.n_genres:
            raise ConfigError("n_artists must be >= n_genres")
        if self.n_users < 1 or self.n_artists < 1 or self.taste_dim < 1:
            raise ConfigError("n_users, n_artists and taste_dim must be positive")
        if lo < 1 or hi < lo:
            raise ConfigError("infeasible events_per_user range (fewer events than users)")
        if not 0 <= self.taste_weight <= 1:
            raise ConfigError("taste_weight must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["events_per_user"] = list(self.events_per_user)
        d["mix_beta"] = list(self.mix_beta)
        return d


@dataclass
class SynthCorpus:
    events: EventLog
    catalog: Catalog
    popularity: np.ndarray  # global artist distribution
    user_probs: np.ndarray  # per-user artist distribution
    taste_mix: np.ndarray  # per-user weight of the personal taste component


def _build_catalog(spec: SynthSpec, rng: np.random.Generator):
    n_a = spec.n_artists
    w_a = len(str(n_a))
    genre_w = 1.0 / np.arange(1, spec.n_genres + 1) ** 1.2
    genre_w /= genre_w.sum()
    genres = [f"genre{g:02d}" for g in range(spec.n_genres)]
    styles = [f"style{s:02d}" for s in range(spec.n_styles)]
    classes = [f"class{c:02d}" for c in range(spec.n_classes)]
    songs: list[SongMeta] = []
    offsets = np.zeros(n_a, dtype=np.int64)
    counts = np.zeros(n_a, dtype=np.int64)
    album_no = 0
    for a in range(n_a):
        artist = f"a{a + 1:0{w_a}d}"
        g = rng.choice(spec.n_genres, p=genre_w)
        gtags = {genres[g]}
        if rng.random() < 0.2:
            gtags.add(genres[rng.integers(spec.n_genres)])
        stag = frozenset({styles[rng.integers(spec.n_styles)]})
        ctag = frozenset({classes[g % spec.n_classes]}) if rng.random() < 0.95 else frozenset()
        offsets[a] = len(songs)
        for _ in range(1 + rng.poisson(1.0)):
            album_no += 1
            album = f"al{album_no:05d}"
            year = None if rng.random() < 0.03 else int(max(1960, 2018 - rng.exponential(8.0)))
            for _ in range(1 + rng.poisson(3.0)):
                dur = int(np.clip(rng.normal(215, 45), 60, 600))
                songs.append(SongMeta("", artist, album, year, dur, frozenset(gtags), stag, ctag))
        counts[a] = len(songs) - offsets[a]
    w_s = len(str(len(songs)))
    songs = [
        SongMeta(f"s{i + 1:0{w_s}d}", s.artist_id, s.album_id, s.release_year, s.duration,
                 s.genre_tags, s.style_tags, s.class_tags)
        for i, s in enumerate(songs)
    ]
    return songs, offsets, counts


def synth_generate(spec: SynthSpec) -> SynthCorpus:
    """Generate events and song metadata, deterministically per ``spec.seed``.

    Artist popularity follows a Zipf law. Each user draws artists from a mix of
    that global distribution and a low-rank personal taste distribution, with
    a user-specific mixing weight, repeat propensity, skip rate and preferred
    listening hour; plays are grouped into sessions separated by long gaps.
    """
    spec.validate()
    rng = substream(spec.seed, "synth")
    songs, offsets, counts = _build_catalog(spec, rng)
    durations = np.array([s.duration for s in songs], dtype=np.int64)

    pop = 1.0 / np.arange(1, spec.n_artists + 1) ** spec.zipf_exponent
    pop /= pop.sum()
    art_vec = rng.normal(size=(spec.n_artists, spec.taste_dim))
    art_vec *= np.sqrt(spec.taste_dim) / np.linalg.norm(art_vec, axis=1, keepdims=True)
    users = rng.normal(size=(spec.n_users, spec.taste_dim))
    logits = spec.taste_sharpness * users @ art_vec.T / np.sqrt(spec.taste_dim) + spec.taste_pop_bias * np.log(pop)
    logits -= logits.max(axis=1, keepdims=True)
    taste = np.exp(logits)
    taste /= taste.sum(axis=1, keepdims=True)
    mix = spec.taste_weight * rng.beta(*spec.mix_beta, size=spec.n_users)
    probs = (1.0 - mix)[:, None] * pop[None, :] + mix[:, None] * taste

    w_u = len(str(spec.n_users))
    lo, hi = spec.events_per_user
    out_u, out_s, out_t, out_l = [], [], [], []
    for u in range(spec.n_users):
        uid = f"u{u + 1:0{w_u}d}"
        n = int(rng.integers(lo, hi + 1))
        repeat_p = rng.beta(2.0, 3.0)
        skip_p = rng.beta(1.5, 8.0)
        hour = rng.integers(24)
        sess_mean = max(1.0, spec.session_length_mean * rng.uniform(0.5, 1.5))
        lengths = []
        while sum(lengths) < n:
            lengths.append(int(rng.geometric(1.0 / sess_mean)))
        lengths[-1] -= sum(lengths) - n
        new_sess = np.zeros(n, dtype=bool)
        new_sess[np.cumsum([0] + lengths[:-1])] = True

        fresh = rng.choice(spec.n_artists, size=n, p=probs[u])
        rep = (rng.random(n) < repeat_p) & ~new_sess
        src = np.maximum.accumulate(np.where(rep, 0, np.arange(n)))
        artists = fresh[src]
        song = offsets[artists] + np.floor(counts[artists] * rng.random(n) ** 2).astype(np.int64)
        dur = durations[song]
        skipped = rng.random(n) < skip_p
        full = rng.random(n) < 0.8
        listened = np.where(skipped, rng.integers(3, 30, size=n),
                            np.where(full, dur, (30 + rng.random(n) * np.maximum(dur - 30, 1)).astype(np.int64)))
        listened = np.minimum(listened, dur)
        played = listened.copy()
        listened = np.where(rng.random(n) < 0.02, -1, listened)
        gaps = np.where(rng.random(n) < 0.9, rng.integers(0, 60, size=n), rng.integers(60, 600, size=n))

        day_starts = np.sort(rng.uniform(0, spec.days, size=len(lengths)))
        t = np.zeros(n, dtype=np.int64)
        prev_end = -np.inf
        i = 0
        for k, ln in enumerate(lengths):
            planned = EPOCH_START + int(day_starts[k]) * 86400 + int(((hour + rng.normal(0, 2.5)) % 24) * 3600)
            start = int(max(planned, prev_end + 901 + rng.integers(0, 3600)))
            steps = played[i : i + ln] + gaps[i : i + ln]
            t[i : i + ln] = start + np.concatenate([[0], np.cumsum(steps[:-1])])
            prev_end = t[i + ln - 1] + played[i + ln - 1]
            i += ln
        out_u.append(np.full(n, uid))
        out_s.extend(songs[j].song_id for j in song.tolist())
        out_t.append(t)
        out_l.append(listened)
    events = EventLog(np.concatenate(out_u), out_s, np.concatenate(out_t), np.concatenate(out_l))
    return SynthCorpus(events, Catalog(songs), pop, probs, mix)


def write_corpus(corpus: SynthCorpus, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ev, so = out / "events.tsv", out / "songs.tsv"
    write_events(corpus.events, ev)
    write_songs(corpus.catalog, so)
    return ev, so
