"""Masked training examples with hard negatives drawn from real negative feedback.

Per epoch and per sequence the pipeline is::

    plan_masks -> apply_p_hard -> (cascade | k random) per slot -> assemble_example

Every step takes an explicit ``numpy.random.Generator`` so a fixed seed fixes
the whole epoch.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple, Sequence

import numpy as np

from .data import FeedbackType, UserSequence

UP = int(FeedbackType.UP)
DOWN = int(FeedbackType.DOWN)
SKIP = int(FeedbackType.SKIP)


class NegativeSource(IntEnum):
    # declaration order is the cascade priority
    SAME_DAY_DOWN = 0
    SAME_DAY_SKIP = 1
    FUTURE_DOWN = 2
    FUTURE_SKIP = 3
    RANDOM = 4


HARD_SOURCES = tuple(NegativeSource)[:4]


class Negative(NamedTuple):
    song: int
    source: NegativeSource
    # index of the consumed input event, -1 for random draws
    event_index: int = -1


@dataclass(frozen=True)
class MaskPlan:
    masked_positions: tuple[int, ...]
    forced_final: bool = True


def plan_masks(seq: UserSequence, p_task: float, rng: np.random.Generator) -> MaskPlan:
    """Mask the final Up plus every other Up independently with probability ``p_task``."""
    if not seq.ends_with_up():
        raise ValueError(f"sequence for {seq.user_id!r} does not end with an Up")
    up_idx = np.flatnonzero(seq.feedback[:-1] == UP)
    draws = rng.random(len(up_idx))
    chosen = up_idx[draws < p_task].tolist()
    chosen.append(len(seq) - 1)
    return MaskPlan(tuple(chosen), True)


def apply_p_hard(plan: MaskPlan, p_hard: float, rng: np.random.Generator) -> list[bool]:
    if not 0.0 <= p_hard <= 1.0:
        raise ValueError(f"p_hard must lie in [0, 1], got {p_hard}")
    return (rng.random(len(plan.masked_positions)) < p_hard).tolist()


class CascadeIndex:
    """Per-position candidate sets for the four hard-negative categories.

    Same-day categories require the masked event's UTC day and station.
    Future categories only require a strictly later timestamp unless
    ``future_station_match`` is set.
    """

    def __init__(self, seq: UserSequence, future_station_match: bool = False):
        self.seq = seq
        self.future_station_match = future_station_match
        self._cache: dict[int, tuple[np.ndarray, ...]] = {}

    def candidates(self, idx: int) -> tuple[np.ndarray, ...]:
        cached = self._cache.get(idx)
        if cached is not None:
            return cached
        seq = self.seq
        fb, st, ts = seq.feedback, seq.stations, seq.timestamps
        days = seq.days
        is_down = fb == DOWN
        is_skip = fb == SKIP
        same_station = st == st[idx]
        same_day = (days == days[idx]) & same_station
        future = ts > ts[idx]
        if self.future_station_match:
            future &= same_station
        out = (
            np.flatnonzero(same_day & is_down),
            np.flatnonzero(same_day & is_skip),
            np.flatnonzero(future & is_down),
            np.flatnonzero(future & is_skip),
        )
        self._cache[idx] = out
        return out

    def select(
        self, idx: int, rng: np.random.Generator, consumed: set[int] | frozenset[int] = frozenset()
    ) -> Negative | None:
        """First non-empty category in cascade order, uniform within it; ``None`` if all empty."""
        for source, cand in zip(HARD_SOURCES, self.candidates(idx)):
            if consumed:
                cand = [c for c in cand.tolist() if c not in consumed]
            if len(cand):
                pick = int(cand[int(rng.integers(len(cand)))])
                return Negative(int(self.seq.songs[pick]), source, pick)
        return None


def select_hard_negative(
    seq: UserSequence,
    masked_idx: int,
    rng: np.random.Generator,
    catalog_size: int,
    *,
    consumed: set[int] | frozenset[int] = frozenset(),
    future_station_match: bool = False,
    index: CascadeIndex | None = None,
) -> Negative:
    """Run the negative cascade for one masked Up, falling back to a random song."""
    if seq.feedback[masked_idx] != UP:
        raise ValueError(f"position {masked_idx} is not an Up event")
    index = index or CascadeIndex(seq, future_station_match)
    hard = index.select(masked_idx, rng, consumed)
    if hard is not None:
        return hard
    positive = int(seq.songs[masked_idx])
    return Negative(int(sample_k_random_negatives(positive, 1, catalog_size, rng)[0]), NegativeSource.RANDOM)


def sample_k_random_negatives(positive: int, k: int, catalog_size: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` distinct songs drawn uniformly without replacement, never ``positive``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if catalog_size - 1 < k:
        raise ValueError(f"catalog of {catalog_size} songs is too small for {k} negatives")
    if k == 1:
        draw = np.array([rng.integers(catalog_size - 1)], dtype=np.int64)
    else:
        draw = rng.choice(catalog_size - 1, size=k, replace=False).astype(np.int64)
    # shift ids at or above the positive to skip over it
    draw[draw >= positive] += 1
    return draw


@dataclass(frozen=True)
class TrainingExample:
    """Model-ready arrays for one sequence.

    ``negatives`` has shape ``(n_slots, k)``; hard negatives fill their whole
    row with the same id, so taking the hardest candidate is a no-op for them.
    """

    songs: np.ndarray
    stations: np.ndarray
    feedback: np.ndarray
    positions: np.ndarray
    slots: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    sources: np.ndarray

    def __len__(self) -> int:
        return len(self.songs)


def assemble_example(
    seq: UserSequence,
    plan: MaskPlan,
    negatives: Sequence[Negative | np.ndarray],
    mask_token: int,
    *,
    positive_only: bool = False,
) -> TrainingExample:
    """Build model inputs: drop consumed negatives, mask the planned slots, re-index positions.

    Each element of ``negatives`` is either a resolved :class:`Negative` or an
    array of random candidate ids (hardest-of-k is resolved by the model).
    With ``positive_only`` every non-Up input is dropped as well.
    """
    if len(negatives) != len(plan.masked_positions):
        raise ValueError("one negative per masked slot is required")
    drop = {n.event_index for n in negatives if isinstance(n, Negative) and n.event_index >= 0}
    keep = np.ones(len(seq), dtype=bool)
    if drop:
        keep[list(drop)] = False
    if positive_only:
        keep &= seq.feedback == UP
    kept_idx = np.flatnonzero(keep)
    new_pos = np.full(len(seq), -1, dtype=np.int64)
    new_pos[kept_idx] = np.arange(len(kept_idx))

    songs = seq.songs[kept_idx].copy()
    stations = seq.stations[kept_idx].copy()
    feedback = seq.feedback[kept_idx].copy()
    masked = np.asarray(plan.masked_positions, dtype=np.int64)
    slots = new_pos[masked]
    songs[slots] = mask_token
    feedback[slots] = UP
    # recency index: most recent input is position 0
    positions = np.arange(len(kept_idx) - 1, -1, -1, dtype=np.int64)

    k = max((len(item) for item in negatives if not isinstance(item, Negative)), default=1)
    neg = np.empty((len(negatives), k), dtype=np.int64)
    sources = np.empty(len(negatives), dtype=np.int64)
    for i, item in enumerate(negatives):
        if isinstance(item, Negative):
            neg[i] = item.song
            sources[i] = item.source
        else:
            neg[i] = item
            sources[i] = NegativeSource.RANDOM
    return TrainingExample(
        songs=songs,
        stations=stations,
        feedback=feedback,
        positions=positions,
        slots=slots,
        positives=seq.songs[masked].copy(),
        negatives=neg,
        sources=sources,
    )


def draw_example(
    seq: UserSequence,
    rng: np.random.Generator,
    *,
    catalog_size: int,
    p_task: float,
    p_hard: float,
    k: int = 1,
    index: CascadeIndex | None = None,
    positive_only: bool = False,
) -> TrainingExample:
    """One epoch's example for ``seq``: masks, hard flags, negatives, assembly.

    A Down/Skip serves at most one slot; later slots that would reuse it fall
    through to the next category.
    """
    index = index or CascadeIndex(seq)
    plan = plan_masks(seq, p_task, rng)
    flags = apply_p_hard(plan, p_hard, rng)
    consumed: set[int] = set()
    negatives: list[Negative | np.ndarray] = []
    for pos, use_hard in zip(plan.masked_positions, flags):
        hard = index.select(pos, rng, consumed) if use_hard else None
        if hard is not None:
            consumed.add(hard.event_index)
            negatives.append(hard)
        else:
            negatives.append(sample_k_random_negatives(int(seq.songs[pos]), k, catalog_size, rng))
    return assemble_example(seq, plan, negatives, mask_token=catalog_size, positive_only=positive_only)


def source_histogram(sources: np.ndarray) -> dict[str, int]:
    counts = np.bincount(np.asarray(sources, dtype=np.int64), minlength=len(NegativeSource))
    return {s.name.lower(): int(counts[s]) for s in NegativeSource}


def write_source_dump(path, rows) -> None:
    """Write ``(slot_position, source, negative_song)`` triples as tab-separated text."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("position\tsource\tnegative\n")
        for position, source, song in rows:
            fh.write(f"{position}\t{NegativeSource(source).name.lower()}\t{song}\n")
