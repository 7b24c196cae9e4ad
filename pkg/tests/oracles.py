"""Slow reference implementations used to cross-check the vectorized code."""

from __future__ import annotations

import warnings

import numpy as np

from negrec.data import SECONDS_PER_DAY, FeedbackEvent, FeedbackType, UserSequence


def cascade_categories(events: list[FeedbackEvent], masked: int, future_station_match: bool = False) -> list[list[int]]:
    """Recompute the four hard-negative candidate lists from raw events, one event at a time."""
    target = events[masked]
    day = target.timestamp // SECONDS_PER_DAY
    cats: list[list[int]] = [[], [], [], []]
    for i, e in enumerate(events):
        same_station = e.station_id == target.station_id
        if e.timestamp // SECONDS_PER_DAY == day and same_station:
            if e.feedback == FeedbackType.DOWN:
                cats[0].append(i)
            elif e.feedback == FeedbackType.SKIP:
                cats[1].append(i)
        if e.timestamp > target.timestamp and (same_station or not future_station_match):
            if e.feedback == FeedbackType.DOWN:
                cats[2].append(i)
            elif e.feedback == FeedbackType.SKIP:
                cats[3].append(i)
    return cats


def first_category(cats: list[list[int]]) -> int:
    for c, members in enumerate(cats):
        if members:
            return c
    return 4


def random_sequence(rng: np.random.Generator, length: int | None = None, n_songs: int = 50) -> UserSequence:
    """A short sequence ending with an Up, over few days and stations so every category occurs, with timestamp ties."""
    n = int(length or rng.integers(1, 25))
    kinds = rng.choice([0, 1, 2], size=n, p=[0.5, 0.25, 0.25])
    kinds[-1] = 0
    days = np.sort(rng.integers(0, 4, size=n))
    ts = days * SECONDS_PER_DAY + np.sort(rng.integers(0, 5000, size=n))
    events = tuple(
        FeedbackEvent("u", int(rng.integers(n_songs)), int(rng.integers(0, 3)), FeedbackType(int(kinds[i])), int(ts[i]))
        for i in range(n)
    )
    return UserSequence("u", events)


def pairwise_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    """Exhaustive pairwise AUC, ties counted as one half."""
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))



def finite_difference_errors(model, batch, step: float = 1e-3) -> dict[str, float]:
    """Norm-wise relative error between autograd and central differences, per parameter tensor.

    Every coordinate is perturbed by ``+-step``; the perturbations of one
    tensor are evaluated together with ``vmap``. Uses the first random
    candidate per slot so the loss is smooth.
    """
    import torch
    from torch.func import functional_call, vmap

    from negrec.model import bce_pair_loss

    def loss(params):
        out = functional_call(model, params, (batch,))
        return bce_pair_loss(out.score(batch.positives), out.score(batch.negatives[:, 0])).mean()

    base = {k: v.detach() for k, v in model.named_parameters()}
    grads = torch.autograd.grad(loss(dict(model.named_parameters())), list(model.parameters()))
    errors = {}
    for (name, p), g in zip(base.items(), grads):
        n = p.numel()
        eye = torch.eye(n, dtype=p.dtype).view(n, *p.shape) * step

        def shifted(delta, name=name, p=p):
            params = dict(base)
            params[name] = p + delta
            return loss(params)

        with warnings.catch_warnings():
            # no vmap batching rule for fused attention; the fallback loop is fine here
            warnings.filterwarnings("ignore", message="There is a performance drop")
            fd = (vmap(shifted)(eye) - vmap(shifted)(-eye)) / (2 * step)
        g = g.reshape(-1)
        denom = torch.maximum(fd.norm(), g.norm())
        errors[name] = 0.0 if denom == 0 else float((fd - g).norm() / denom)
    return errors


def tiny_model(trial: int, d_model: int = 8):
    """A random float64 model with dropout off and unit-scale embeddings, plus a two-sequence batch.

    Below ``d_model=8`` layer norm over so few coordinates has enough
    curvature that step-1e-3 central differences carry ~1e-4 truncation error.
    """
    import torch

    from negrec.model import ModelConfig, SequenceScorer, collate
    from negrec.sampling import draw_example

    rng = np.random.default_rng(trial)
    n_songs = int(rng.integers(5, 12))
    cfg = ModelConfig(
        n_songs, 3, d_model=d_model, n_layers=int(rng.integers(1, 3)), n_heads=int(rng.choice([1, 2])),
        max_len=30, dropout=0.0, seed=trial, ffn_mult=2,
    )
    model = SequenceScorer(cfg).double()
    gen = torch.Generator().manual_seed(trial)
    with torch.no_grad():
        for emb in (model.song_emb, model.station_emb, model.feedback_emb, model.pos_emb):
            emb.weight.normal_(0.0, 1.0, generator=gen)
    examples = [
        draw_example(random_sequence(rng, n_songs=n_songs), rng, catalog_size=n_songs, p_task=0.3, p_hard=0.5)
        for _ in range(2)
    ]
    return model, collate(examples)


def toy_events(n_users: int, skip_only: set[str] = frozenset(), days: int = 60, seed: int = 0) -> list[FeedbackEvent]:
    """Seven sessions per user on two stations; skip-only users never give an Up."""
    rng = np.random.default_rng(seed)
    events = []
    for u in range(n_users):
        name = f"u{u}"
        for d in sorted(rng.integers(0, days, 6).tolist()) + [days - 1]:
            t = d * SECONDS_PER_DAY + int(rng.integers(1000))
            station = int(rng.integers(1, 3))
            kinds = [FeedbackType.SKIP, FeedbackType.DOWN] if name in skip_only else \
                [FeedbackType.UP, FeedbackType.SKIP, FeedbackType.DOWN, FeedbackType.UP]
            for j, kind in enumerate(kinds):
                events.append(FeedbackEvent(name, int(rng.integers(50)), station, kind, t + j))
    return events
