import hashlib

import numpy as np
import pytest

from negrec.data import SECONDS_PER_DAY, FeedbackType, build_sequences, ingest, make_paired_tests, split
from negrec.synth import GroundTruth, SynthConfig, generate, oracle_accuracy

SMALL = dict(n_users=600, n_songs=400, n_stations=8, days=60, test_days=15)


@pytest.fixture(scope="module")
def corpus():
    return generate(SynthConfig(**SMALL, seed=3))


def user_feedback(corpus):
    per_user = {}
    for e in corpus.events:
        per_user.setdefault(e.user_id, []).append(e)
    return per_user


def test_skip_only_fraction_is_exact(corpus):
    per_user = user_feedback(corpus)
    assert len(per_user) == 600
    no_up = [u for u, evs in per_user.items() if not any(e.feedback is FeedbackType.UP for e in evs)]
    assert len(no_up) == round(0.32 * 600)
    flagged = {f"u{i}" for i in np.flatnonzero(corpus.truth.skip_only)}
    assert set(no_up) == flagged


def test_songs_nearest_their_centroid(corpus):
    t = corpus.truth
    d2 = ((t.song_vectors[:, None] - t.centroids[None]) ** 2).sum(-1)
    assert np.array_equal(d2.argmin(1), t.song_station)


def test_events_respect_stations_and_time(corpus):
    t = corpus.truth
    cat = corpus.catalog
    start = min(e.timestamp for e in corpus.events)
    span = max(e.timestamp for e in corpus.events) - start
    assert span < SMALL["days"] * SECONDS_PER_DAY
    for e in corpus.events[:5000]:
        song = int(cat.songs[e.song_id][1:])
        assert cat.stations[e.station_id] == f"st{t.song_station[song]}"


def test_noiseless_ordering():
    cfg = SynthConfig(**SMALL, affinity_noise=0.0, seed=1)
    c = generate(cfg)
    t = c.truth
    for user, evs in user_feedback(c).items():
        u = int(user[1:])
        prefs = {fb: [t.preference(u, int(c.catalog.songs[e.song_id][1:])) for e in evs if e.feedback is fb]
                 for fb in (FeedbackType.UP, FeedbackType.DOWN)}
        if prefs[FeedbackType.UP] and prefs[FeedbackType.DOWN]:
            assert min(prefs[FeedbackType.UP]) > max(prefs[FeedbackType.DOWN])


def cases_for(c):
    s = split(build_sequences(c.events, 64), c.config.test_window, 0.1, seed=0)
    return make_paired_tests(s.test)


def test_oracle_noiseless_is_perfect():
    cfg = SynthConfig(**SMALL, affinity_noise=0.0, false_negative_rate=0.0, skip_dislike_mix=1.0, seed=2)
    c = generate(cfg)
    cases = cases_for(c)
    assert len(cases) > 200
    assert oracle_accuracy(c.truth, cases, c.catalog) == 1.0


def test_oracle_pure_noise_is_chance():
    cfg = SynthConfig(**{**SMALL, "n_users": 1500}, affinity_noise=1e4, seed=4)
    c = generate(cfg)
    cases = cases_for(c)
    assert len({x.user_id for x in cases}) > 500
    assert abs(oracle_accuracy(c.truth, cases, c.catalog) - 0.5) < 0.02


def test_default_noise_oracle_is_informative(corpus):
    assert oracle_accuracy(corpus.truth, cases_for(corpus), corpus.catalog) > 0.8


def test_written_files_ingest_cleanly(corpus, tmp_path):
    paths = corpus.write(tmp_path)
    result = ingest(paths["events"])
    assert result.malformed == 0
    assert result.events == corpus.events
    assert result.catalog.songs == corpus.catalog.songs
    truth = GroundTruth.load(paths["truth"])
    assert np.array_equal(truth.user_vectors, corpus.truth.user_vectors)
    assert np.array_equal(truth.skip_only, corpus.truth.skip_only)


def test_seed_determinism(tmp_path):
    cfg = SynthConfig(**{**SMALL, "n_users": 200}, seed=9)
    a = generate(cfg).write(tmp_path / "a")["events"]
    b = generate(cfg).write(tmp_path / "b")["events"]
    c = generate(SynthConfig(**{**SMALL, "n_users": 200}, seed=10)).write(tmp_path / "c")["events"]
    digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()  # noqa: E731
    assert digest(a) == digest(b) != digest(c)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(up_rate=1.5)
    with pytest.raises(ValueError):
        SynthConfig(n_songs=50)
    with pytest.raises(ValueError):
        SynthConfig(days=10, test_days=10)
