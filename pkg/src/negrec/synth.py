"""Synthetic radio listening logs with a planted latent-factor ground truth.

Songs live in a latent space clustered around station centroids; each user
has a latent taste vector and a few favourite stations. A session exposes
songs from one station and the user reacts according to the standardized
true preference ``dot(user, song)`` plus noise:

* liked, new song: Up (``up_rate``), else Skip (``false_negative_rate``)
* disliked song: Down (``down_rate``), else Skip (``skip_rate * skip_dislike_mix``)
* replay of an already-liked song: Skip (``skip_rate * (1 - skip_dislike_mix)``)

A fixed share of users never gives an Up. Downed songs are never replayed.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    SECONDS_PER_DAY,
    Catalog,
    DatasetDescriptor,
    FeedbackEvent,
    FeedbackType,
    PairedTestCase,
    write_events,
)
from .evaluation import accuracy_from_scores

# 2020-09-14T00:00:00Z, a UTC midnight
BASE_TIMESTAMP = 18_519 * SECONDS_PER_DAY


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 10_000
    n_songs: int = 5_000
    n_stations: int = 20
    latent_dim: int = 4
    station_spread: float = 1.0
    song_spread: float = 1.0
    affinity_noise: float = 0.3
    like_threshold: float = 0.4
    up_rate: float = 0.6
    down_rate: float = 0.3
    skip_rate: float = 0.6
    skip_dislike_mix: float = 0.8
    false_negative_rate: float = 0.1
    replay_rate: float = 0.1
    skip_only_fraction: float = 0.32
    favourite_sharpness: float = 1.0
    popularity_skew: float = 1.5
    sessions_mean: float = 16.0
    exposures_mean: float = 8.0
    days: int = 120
    test_days: int = 30
    seed: int = 0

    def __post_init__(self) -> None:
        rates = (
            "up_rate", "down_rate", "skip_rate", "skip_dislike_mix",
            "false_negative_rate", "replay_rate", "skip_only_fraction",
        )
        for name in rates:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.n_songs < 100:
            raise ValueError("n_songs must be at least 100")
        if self.n_users < 1 or self.n_stations < 1 or self.latent_dim < 1:
            raise ValueError("n_users, n_stations and latent_dim must be positive")
        if not 0 < self.test_days < self.days:
            raise ValueError("test_days must lie strictly inside the time span")

    @property
    def test_window(self) -> int:
        return self.test_days * SECONDS_PER_DAY


@dataclass
class GroundTruth:
    user_vectors: np.ndarray
    song_vectors: np.ndarray
    centroids: np.ndarray
    song_station: np.ndarray
    skip_only: np.ndarray

    def preference(self, user: int, songs) -> np.ndarray:
        return self.song_vectors[songs] @ self.user_vectors[user]

    def save(self, path: str | Path) -> None:
        np.savez(path, **dataclasses.asdict(self))

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruth":
        with np.load(path) as data:
            return cls(**{f.name: data[f.name] for f in dataclasses.fields(cls)})


@dataclass
class SynthCorpus:
    config: SynthConfig
    events: list[FeedbackEvent]
    catalog: Catalog
    truth: GroundTruth

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        """Write ``events.csv``, ``descriptor.txt`` and ``ground_truth.npz`` to ``out_dir``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "events": out / "events.csv",
            "descriptor": out / "descriptor.txt",
            "truth": out / "ground_truth.npz",
        }
        descriptor = DatasetDescriptor(max_len=64)
        write_events(paths["events"], self.events, self.catalog, descriptor)
        descriptor.save(paths["descriptor"])
        self.truth.save(paths["truth"])
        return paths


def user_name(i: int) -> str:
    return f"u{i}"


def song_name(j: int) -> str:
    return f"s{j}"


def station_name(s: int) -> str:
    return f"st{s}"


def _world(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng([cfg.seed, 0])
    D = cfg.latent_dim
    centroids = rng.normal(0.0, cfg.station_spread, (cfg.n_stations, D))
    init = rng.integers(cfg.n_stations, size=cfg.n_songs)
    songs = centroids[init] + rng.normal(0.0, cfg.song_spread, (cfg.n_songs, D))
    # station = nearest centroid, so every song is closest to its own station's centroid
    d2 = ((songs[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    station = d2.argmin(axis=1)
    popularity = rng.lognormal(0.0, cfg.popularity_skew, cfg.n_songs)
    users = rng.normal(0.0, 1.0, (cfg.n_users, D))
    n_skip_only = int(round(cfg.skip_only_fraction * cfg.n_users))
    skip_only = np.zeros(cfg.n_users, dtype=bool)
    skip_only[rng.permutation(cfg.n_users)[:n_skip_only]] = True
    return centroids, songs, station, popularity, users, skip_only


def generate(config: SynthConfig) -> SynthCorpus:
    """Simulate listening sessions for every user. Deterministic in ``config.seed``."""
    cfg = config
    centroids, songs, song_station, popularity, users, skip_only = _world(cfg)
    members = [np.flatnonzero(song_station == s) for s in range(cfg.n_stations)]
    slot_in_station = np.empty(cfg.n_songs, dtype=np.int64)
    for m in members:
        slot_in_station[m] = np.arange(len(m))
    nonempty = np.array([s for s in range(cfg.n_stations) if len(members[s])])
    catalog = Catalog()
    events: list[FeedbackEvent] = []
    for u in range(cfg.n_users):
        rng = np.random.default_rng([cfg.seed, 1, u])
        for song, station, fb, ts in _simulate_user(cfg, rng, users[u], bool(skip_only[u]), songs, centroids,
                                                     members, slot_in_station, nonempty, popularity):
            events.append(FeedbackEvent(
                user_name(u), catalog.song(song_name(song)), catalog.station(station_name(station)), fb, ts,
            ))
    truth = GroundTruth(users, songs, centroids, song_station, skip_only)
    return SynthCorpus(cfg, events, catalog, truth)


def _simulate_user(cfg, rng, taste, is_skip_only, songs, centroids, members, slot_in_station, nonempty, popularity):
    affinity = centroids[nonempty] @ taste
    logits = cfg.favourite_sharpness * (affinity - affinity.max()) / (affinity.std() + 1e-12)
    p = np.exp(logits)
    p /= p.sum()
    n_fav = min(len(nonempty), 1 + int(rng.integers(3)))
    favourites = rng.choice(nonempty, size=n_fav, replace=False, p=p)

    pool = np.concatenate([members[s] for s in favourites])
    pref = songs[pool] @ taste
    song_station_of = {int(c): int(s) for s in favourites for c in members[s]}
    z_of = dict(zip(pool.tolist(), ((pref - pref.mean()) / (pref.std() + 1e-12)).tolist()))

    n_sessions = 2 + int(rng.poisson(max(cfg.sessions_mean - 2, 0.0)))
    days = np.sort(rng.integers(0, cfg.days, size=n_sessions))
    days[0] = rng.integers(0, max(1, (cfg.days - cfg.test_days) // 2))
    days.sort()

    thr = cfg.like_threshold
    liked: dict[int, set[int]] = {int(s): set() for s in favourites}
    # exposure weights; zeroed once a song is liked or downed
    weights = {int(s): popularity[members[s]].copy() for s in favourites}
    out: list[tuple[int, int, FeedbackType, int]] = []
    for si, day in enumerate(days.tolist()):
        station = int(favourites[int(rng.integers(n_fav))])
        start = BASE_TIMESTAMP + day * SECONDS_PER_DAY + int(rng.integers(6 * 3600, 20 * 3600))
        n_exp = 1 + int(rng.poisson(max(cfg.exposures_mean - 1, 0.0)))
        cand = members[station]
        w = weights[station]
        t = start
        session: list[tuple[int, int, FeedbackType, int]] = []
        for _ in range(n_exp):
            t += 180 + int(rng.integers(120))
            if liked[station] and rng.random() < cfg.replay_rate:
                song = int(rng.choice(sorted(liked[station])))
                if rng.random() < cfg.skip_rate * (1.0 - cfg.skip_dislike_mix):
                    session.append((song, station, FeedbackType.SKIP, t))
                continue
            cum = np.cumsum(w)
            if cum[-1] <= 0:
                continue
            pick = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), len(cand) - 1)
            song = int(cand[pick])
            z = z_of[song] + cfg.affinity_noise * rng.normal()
            r = rng.random()
            if z > thr:
                if not is_skip_only and r < cfg.up_rate:
                    session.append((song, station, FeedbackType.UP, t))
                    liked[station].add(song)
                    w[pick] = 0.0
                elif r > 1.0 - cfg.false_negative_rate:
                    session.append((song, station, FeedbackType.SKIP, t))
            elif z < -thr:
                if r < cfg.down_rate:
                    session.append((song, station, FeedbackType.DOWN, t))
                    w[pick] = 0.0
                elif r < cfg.down_rate + (1.0 - cfg.down_rate) * cfg.skip_rate * cfg.skip_dislike_mix:
                    session.append((song, station, FeedbackType.SKIP, t))
        if si == 0:
            session = _ensure_first_feedback(session, is_skip_only, favourites, song_station_of, z_of, liked, t)
            for song, st, fb, _ in session:
                if fb is FeedbackType.UP:
                    weights[st][slot_in_station[song]] = 0.0
        out.extend(session)
    return out


def _ensure_first_feedback(session, is_skip_only, favourites, song_station_of, z_of, liked, t):
    """Guarantee an Up (regular users) or a Skip (skip-only users) in the first session."""
    if is_skip_only:
        if any(fb is not FeedbackType.UP for _, _, fb, _ in session):
            return session
        song = min(z_of, key=z_of.get)
        kind = FeedbackType.SKIP
    else:
        if any(fb is FeedbackType.UP for _, _, fb, _ in session):
            return session
        song = max(z_of, key=z_of.get)
        kind = FeedbackType.UP
    station = song_station_of[song]
    if kind is FeedbackType.UP:
        liked[station].add(song)
    return session + [(song, station, kind, t + 200)]


def oracle_scores(truth: GroundTruth, cases: Sequence[PairedTestCase], catalog: Catalog) -> tuple[np.ndarray, np.ndarray]:
    song_ids = np.array([int(name[1:]) for name in catalog.songs])
    users = np.array([int(c.user_id[1:]) for c in cases])
    pos = song_ids[[c.positive.song_id for c in cases]]
    neg = song_ids[[c.negative.song_id for c in cases]]
    u = truth.user_vectors[users]
    return (u * truth.song_vectors[pos]).sum(1), (u * truth.song_vectors[neg]).sum(1)


def oracle_accuracy(truth: GroundTruth, cases: Sequence[PairedTestCase], catalog: Catalog) -> float:
    """Paired accuracy obtained by scoring with the true preferences."""
    pos, neg = oracle_scores(truth, cases, catalog)
    return accuracy_from_scores([c.user_id for c in cases], pos, neg).value
