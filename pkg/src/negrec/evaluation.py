"""Paired accuracy (mean per-user AUC), MRR, coverage and embedding diagnostics."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .data import DatasetSplit, FeedbackType, PairedTestCase, UserSequence
from .model import SequenceScorer, collate, inference_example

TIE = 0.5


@dataclass
class AccuracyResult:
    value: float
    pooled: float
    per_user: dict[str, float]
    n_pairs: int

    @property
    def n_users(self) -> int:
        return len(self.per_user)


def pair_outcomes(pos: np.ndarray, neg: np.ndarray) -> np.ndarray:
    """1 for a win, 0.5 for a tie, 0 for a loss."""
    pos, neg = np.asarray(pos, dtype=np.float64), np.asarray(neg, dtype=np.float64)
    return np.where(pos > neg, 1.0, np.where(pos == neg, TIE, 0.0))


def accuracy_from_scores(user_ids: Sequence[str], pos: np.ndarray, neg: np.ndarray) -> AccuracyResult:
    """Mean over users of each user's mean pair outcome."""
    outcomes = pair_outcomes(pos, neg)
    if len(outcomes) == 0:
        raise ValueError("no pairs to evaluate")
    sums: dict[str, float] = defaultdict(float)
    counts: dict[str, int] = defaultdict(int)
    for uid, o in zip(user_ids, outcomes.tolist()):
        sums[uid] += o
        counts[uid] += 1
    per_user = {u: sums[u] / counts[u] for u in sums}
    value = math.fsum(per_user.values()) / len(per_user)
    return AccuracyResult(value, float(outcomes.mean()), per_user, len(outcomes))


@torch.no_grad()
def contextual_vectors(
    params: SequenceScorer,
    contexts: Sequence[tuple[UserSequence, int]],
    batch_size: int = 256,
) -> torch.Tensor:
    """Contextual vector of a masked slot appended to each ``(context, station)``."""
    was_training = params.training
    params.eval()
    out = []
    # length-sorted batches keep padding small; results are put back in input order
    order = sorted(range(len(contexts)), key=lambda i: len(contexts[i][0]))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        batch = collate([inference_example(contexts[i][0], contexts[i][1], params.config) for i in idx])
        out.append(params(batch).contextual)
    params.train(was_training)
    d = params.config.d_model
    dtype = params.song_emb.weight.dtype
    if not out:
        return torch.zeros((0, d), dtype=dtype)
    stacked = torch.cat(out)
    result = torch.empty_like(stacked)
    result[torch.as_tensor(order)] = stacked
    return result


def _case_contexts(cases: Sequence[PairedTestCase]) -> tuple[list[tuple[UserSequence, int]], np.ndarray]:
    keys: dict[tuple[str, int], int] = {}
    contexts: list[tuple[UserSequence, int]] = []
    index = np.empty(len(cases), dtype=np.int64)
    for i, case in enumerate(cases):
        key = (case.user_id, case.station_id)
        if key not in keys:
            keys[key] = len(contexts)
            contexts.append((case.context, case.station_id))
        index[i] = keys[key]
    return contexts, index


def score_cases(params: SequenceScorer, cases: Sequence[PairedTestCase]) -> tuple[np.ndarray, np.ndarray]:
    contexts, index = _case_contexts(cases)
    h = contextual_vectors(params, contexts)[torch.from_numpy(index)]
    table = params.song_emb.weight.detach()
    pos = torch.as_tensor([c.positive.song_id for c in cases])
    neg = torch.as_tensor([c.negative.song_id for c in cases])
    return (h * table[pos]).sum(-1).numpy(), (h * table[neg]).sum(-1).numpy()


def paired_accuracy(params: SequenceScorer, cases: Sequence[PairedTestCase]) -> AccuracyResult:
    if not cases:
        raise ValueError("no test cases")
    pos, neg = score_cases(params, cases)
    return accuracy_from_scores([c.user_id for c in cases], pos, neg)


def rank_with_ties(target: np.ndarray, pool: np.ndarray) -> np.ndarray:
    """1-based rank of ``target[i]`` among itself and ``pool[i]``; ties share the mean rank."""
    target = np.asarray(target, dtype=np.float64)[:, None]
    pool = np.asarray(pool, dtype=np.float64)
    greater = (pool > target).sum(axis=1)
    ties = (pool == target).sum(axis=1)
    return 1.0 + greater + ties / 2.0


def mrr_from_scores(target: np.ndarray, pool: np.ndarray) -> float:
    return float(np.mean(1.0 / rank_with_ties(target, pool)))


def mrr(
    params: SequenceScorer,
    cases: Sequence[PairedTestCase],
    pool_size: int = 1000,
    seed: int = 0,
    chunk: int = 512,
) -> tuple[float, float]:
    """MRR of the Up and of the Down song against ``pool_size - 1`` random catalog songs.

    Both targets of a case are ranked against the same random pool, drawn
    without replacement and excluding the two targets.
    """
    if pool_size < 2:
        raise ValueError("pool_size must be at least 2")
    if not cases:
        raise ValueError("no test cases")
    n_songs = params.config.catalog_size
    m = pool_size - 1
    if n_songs - 2 < m:
        raise ValueError(f"catalog of {n_songs} songs is too small for pool_size {pool_size}")
    contexts, index = _case_contexts(cases)
    h = contextual_vectors(params, contexts)[torch.from_numpy(index)]
    table = params.song_emb.weight.detach()[:n_songs]
    pos_ids = np.array([c.positive.song_id for c in cases])
    neg_ids = np.array([c.negative.song_id for c in cases])
    rng = np.random.default_rng(seed)
    rr_up, rr_down = [], []
    for start in range(0, len(cases), chunk):
        stop = min(start + chunk, len(cases))
        rows = np.arange(stop - start)
        scores = (h[start:stop] @ table.T).numpy()
        # uniform pool without replacement: the m smallest of iid random keys
        keys = rng.random((stop - start, n_songs))
        keys[rows, pos_ids[start:stop]] = np.inf
        keys[rows, neg_ids[start:stop]] = np.inf
        pool = np.argpartition(keys, m - 1, axis=1)[:, :m]
        pool_scores = np.take_along_axis(scores, pool, axis=1)
        rr_up.append(1.0 / rank_with_ties(scores[rows, pos_ids[start:stop]], pool_scores))
        rr_down.append(1.0 / rank_with_ties(scores[rows, neg_ids[start:stop]], pool_scores))
    return float(np.mean(np.concatenate(rr_up))), float(np.mean(np.concatenate(rr_down)))


@dataclass
class CoverageReport:
    users: int
    covered_with_skips: int
    covered_positive_only: int

    @property
    def coverage_total(self) -> float:
        return self.covered_with_skips / self.users if self.users else 0.0

    @property
    def coverage_positive_only(self) -> float:
        return self.covered_positive_only / self.users if self.users else 0.0

    @property
    def coverage_skip_only(self) -> float:
        """Share of users reachable only because negative feedback is accepted as input."""
        return (self.covered_with_skips - self.covered_positive_only) / self.users if self.users else 0.0


def coverage(split: DatasetSplit, params: SequenceScorer | None = None) -> CoverageReport:
    """Count users with at least one accepted input event before the test cutoff.

    Every feedback type is accepted in skip-input mode; only Ups in
    positive-only mode. ``params`` is accepted for interface symmetry; which
    inputs a model accepts is fixed by the two modes, not by its weights.
    """
    histories: dict[str, UserSequence] = {}
    for group in (split.train, split.validation, split.inference_only):
        for seq in group:
            histories[seq.user_id] = seq
    for h in split.test:
        histories[h.user_id] = h.context
    users = split.all_users()
    with_skips = sum(1 for u in users if u in histories and len(histories[u]) > 0)
    positive_only = sum(1 for u in users if u in histories and histories[u].has_up())
    return CoverageReport(len(users), with_skips, positive_only)


FEEDBACK_ROWS = (FeedbackType.UP, FeedbackType.DOWN, FeedbackType.SKIP)


def cosine_matrix(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    unit = rows / np.where(norms == 0, 1.0, norms)
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(sim, 1.0)
    return sim


def feedback_similarity(
    params: SequenceScorer, types: Sequence[FeedbackType] = FEEDBACK_ROWS
) -> tuple[list[str], np.ndarray]:
    """Cosine similarities between the learned feedback embeddings."""
    table = params.feedback_emb.weight.detach().cpu().numpy()
    return [t.label for t in types], cosine_matrix(table[[int(t) for t in types]])


def up_fraction(seq: UserSequence) -> float:
    if not len(seq):
        return 0.0
    return float(np.mean(seq.feedback == int(FeedbackType.UP)))


def accuracy_by_feedback_bin(
    params: SequenceScorer,
    cases: Sequence[PairedTestCase],
    width: float = 0.1,
) -> list[dict]:
    """Paired accuracy of users bucketed by their share of Up feedback in context."""
    pos, neg = score_cases(params, cases)
    return accuracy_by_bin_from_scores(cases, pos, neg, width)


def accuracy_by_bin_from_scores(cases, pos, neg, width: float = 0.1) -> list[dict]:
    n_bins = int(round(1.0 / width))
    result = accuracy_from_scores([c.user_id for c in cases], pos, neg)
    bin_of: dict[str, int] = {}
    for c in cases:
        if c.user_id not in bin_of:
            bin_of[c.user_id] = min(int(math.floor(up_fraction(c.context) / width + 1e-9)), n_bins - 1)
    members: dict[int, list[float]] = defaultdict(list)
    for uid, acc in result.per_user.items():
        members[bin_of[uid]].append(acc)
    return [
        {
            "bin_low": round(b * width, 10),
            "bin_high": round((b + 1) * width, 10),
            "users": len(members[b]),
            "accuracy": float(np.mean(members[b])),
        }
        for b in sorted(members)
    ]


@dataclass
class EvalReport:
    paired_accuracy: float
    pooled_accuracy: float
    one_pair_accuracy: float | None
    mrr_up: float
    mrr_down: float
    coverage_total: float
    coverage_positive_only: float
    coverage_skip_only: float
    similarity_labels: list[str]
    similarity: list[list[float]]
    bins: list[dict]
    n_users: int
    n_pairs: int
    ablations: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def evaluate(
    params: SequenceScorer,
    cases: Sequence[PairedTestCase],
    split: DatasetSplit,
    *,
    pool_size: int = 1000,
    seed: int = 0,
    one_pair_cases: Sequence[PairedTestCase] | None = None,
) -> EvalReport:
    """Full evaluation suite on one model."""
    acc = paired_accuracy(params, cases)
    one = paired_accuracy(params, one_pair_cases).value if one_pair_cases else None
    pool = min(pool_size, params.config.catalog_size - 1)
    mrr_up, mrr_down = mrr(params, cases, pool, seed)
    cov = coverage(split, params)
    labels, sim = feedback_similarity(params)
    return EvalReport(
        paired_accuracy=acc.value,
        pooled_accuracy=acc.pooled,
        one_pair_accuracy=one,
        mrr_up=mrr_up,
        mrr_down=mrr_down,
        coverage_total=cov.coverage_total,
        coverage_positive_only=cov.coverage_positive_only,
        coverage_skip_only=cov.coverage_skip_only,
        similarity_labels=labels,
        similarity=sim.tolist(),
        bins=accuracy_by_feedback_bin(params, cases),
        n_users=acc.n_users,
        n_pairs=acc.n_pairs,
    )


def write_table(path: str | Path, rows: Sequence[Mapping], delimiter: str = "\t") -> None:
    """Write dict rows as a delimited table (columns from the first row)."""
    rows = list(rows)
    if not rows:
        Path(path).write_text("", encoding="utf-8")
        return
    cols = list(rows[0].keys())
    lines = [delimiter.join(cols)]
    for r in rows:
        lines.append(delimiter.join(_cell(r.get(c)) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return "" if v is None else str(v)


ABLATIONS = ("no_positional", "no_hard_negatives", "positive_only", "half_max_len")


def run_ablations(
    split: DatasetSplit,
    model_config,
    train_config,
    *,
    variants: Sequence[str] = ABLATIONS,
    train_fn: Callable | None = None,
    one_pair: bool = False,
) -> list[dict]:
    """Train the full model and each ablated variant; report test-accuracy deltas.

    Deltas are given in absolute accuracy points (x100) and relative percent.
    """
    from .data import make_paired_tests
    from .training import ablated_configs, train

    train_fn = train_fn or train
    cases = make_paired_tests(split.test, one_per_user=one_pair)
    rows = []
    full_model, _ = train_fn(split, model_config, train_config)
    full = paired_accuracy(full_model, cases).value
    full_cov = coverage(split)
    rows.append(_ablation_row("full", full, full, full_cov.coverage_total))
    for name in variants:
        mcfg, tcfg = ablated_configs(name, model_config, train_config)
        model, _ = train_fn(split, mcfg, tcfg)
        acc = paired_accuracy(model, cases).value
        cov = full_cov.coverage_positive_only if mcfg.positive_only else full_cov.coverage_total
        rows.append(_ablation_row(name, acc, full, cov))
    return rows


def _ablation_row(name: str, acc: float, full: float, cov: float) -> dict:
    return {
        "variant": name,
        "accuracy": acc,
        "delta_points": 100.0 * (acc - full),
        "delta_relative_pct": 100.0 * (acc - full) / full if full else 0.0,
        "coverage": cov,
    }
