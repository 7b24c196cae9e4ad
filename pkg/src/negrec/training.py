"""Epoch loop: resample masks and negatives, Adam steps on the pair loss, early stopping."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import DatasetSplit, PairedTestCase, make_paired_tests
from .evaluation import mrr, paired_accuracy
from .model import ModelConfig, SequenceScorer, batch_loss, collate, save_checkpoint
from .sampling import CascadeIndex, NegativeSource, draw_example

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    p_task: float = 0.15
    p_hard: float = 1.0
    k_random: int = 1
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_epochs: int = 40
    patience: int = 5
    seed: int = 0
    future_station_match: bool = False
    # accuracy gap (absolute) that still counts as converged
    convergence_tolerance: float = 0.005

    def __post_init__(self) -> None:
        for name in ("p_task", "p_hard"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.k_random < 1:
            raise ValueError("k_random must be at least 1")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("patience, max_epochs and batch_size must be positive")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    source_histograms: list[dict[str, int]] = field(default_factory=list)
    masked_slots: list[int] = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = float("nan")
    epochs_to_converge: int = 0

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def convergence_epoch(val_accuracy: Sequence[float], tolerance: float = 0.005) -> int:
    """First (1-based) epoch whose accuracy is within ``tolerance`` of the best."""
    if not val_accuracy:
        return 0
    best = max(val_accuracy)
    for i, acc in enumerate(val_accuracy, 1):
        if acc >= best - tolerance:
            return i
    return len(val_accuracy)


def train(
    split: DatasetSplit,
    model_config: ModelConfig,
    train_config: TrainConfig,
    *,
    val_cases: Sequence[PairedTestCase] | None = None,
    lr_schedule: Callable[[int], float] | None = None,
    dtype: torch.dtype = torch.float32,
) -> tuple[SequenceScorer, TrainReport]:
    """Train a scorer and return the best-validation weights with a report.

    Every epoch redraws masks, hard-negative flags and negatives from a
    generator seeded by ``(seed, epoch)`` and visits sequences in a seeded
    shuffled order. Training stops once validation paired accuracy has not
    improved for ``patience`` epochs. ``lr_schedule`` maps the epoch number to
    a learning-rate multiplier.
    """
    if not split.train:
        raise ValueError("empty training partition")
    cfg = train_config
    seqs = [s.tail(model_config.max_len) for s in split.train]
    indices = [CascadeIndex(s, cfg.future_station_match) for s in seqs]
    lengths = np.array([len(s) for s in seqs])
    if val_cases is None:
        val_cases = make_paired_tests(split.validation_holdout)
    if not val_cases:
        logger.warning("no validation pairs; early stopping disabled")

    torch.manual_seed(cfg.seed)
    model = SequenceScorer(model_config).to(dtype)
    opt = torch.optim.Adam(
        model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay
    )
    report = TrainReport()
    best_state = copy.deepcopy(model.state_dict())
    best = -math.inf
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        if lr_schedule is not None:
            for group in opt.param_groups:
                group["lr"] = cfg.lr * lr_schedule(epoch)
        start = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        batches = _length_bucketed_batches(lengths, cfg.batch_size, rng)
        hist = np.zeros(len(NegativeSource), dtype=np.int64)
        total, slots = 0.0, 0
        model.train()
        for b, members in enumerate(batches):
            examples = [
                draw_example(
                    seqs[i], rng,
                    catalog_size=model_config.catalog_size,
                    p_task=cfg.p_task, p_hard=cfg.p_hard, k=cfg.k_random,
                    index=indices[i], positive_only=model_config.positive_only,
                )
                for i in members
            ]
            batch = collate(examples)
            loss, _ = batch_loss(model, batch)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss.item()} at epoch {epoch}, batch {b}; "
                    f"lr={opt.param_groups[0]['lr']}, slots={batch.n_slots}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            n = batch.n_slots
            total += loss.item() * n
            slots += n
            hist += np.bincount(batch.sources.numpy(), minlength=len(NegativeSource))
        report.train_loss.append(total / slots)
        report.masked_slots.append(slots)
        report.source_histograms.append({s.name.lower(): int(hist[s]) for s in NegativeSource})

        acc = paired_accuracy(model, val_cases).value if val_cases else -report.train_loss[-1]
        report.val_accuracy.append(acc)
        report.epoch_seconds.append(time.perf_counter() - start)
        logger.info("epoch %d loss %.4f val %.4f (%.1fs)", epoch, report.train_loss[-1], acc, report.epoch_seconds[-1])
        if acc > best:
            best, stale = acc, 0
            best_state = copy.deepcopy(model.state_dict())
            report.best_epoch = epoch
        else:
            stale += 1
            if val_cases and stale >= cfg.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    report.best_val_accuracy = best
    report.epochs_to_converge = convergence_epoch(report.val_accuracy, cfg.convergence_tolerance)
    return model, report


def _length_bucketed_batches(lengths: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle, sort by length within windows of 16 batches, then shuffle the batch order.

    Keeps padding small while every batch still mixes users at random.
    """
    order = rng.permutation(len(lengths))
    window = 16 * batch_size
    batches = []
    for start in range(0, len(order), window):
        chunk = order[start:start + window]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches.extend(chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def ablated_configs(name: str, model_config: ModelConfig, train_config: TrainConfig) -> tuple[ModelConfig, TrainConfig]:
    """Model/train configs for a named ablation (or ``baseline`` / ``full``)."""
    m, t = model_config, train_config
    if name == "full":
        return m, t
    if name == "no_positional":
        return dataclasses.replace(m, use_positional=False), t
    if name == "no_hard_negatives":
        return m, dataclasses.replace(t, p_hard=0.0)
    if name == "positive_only":
        return dataclasses.replace(m, positive_only=True), t
    if name == "half_max_len":
        return dataclasses.replace(m, max_len=max(2, m.max_len // 2)), t
    if name == "baseline":
        return dataclasses.replace(m, positive_only=True), dataclasses.replace(t, p_hard=0.0, k_random=1)
    raise ValueError(f"unknown ablation {name!r}")


def _sweep(
    param: str,
    values: Sequence,
    split: DatasetSplit,
    model_config: ModelConfig,
    train_config: TrainConfig,
    test_cases: Sequence[PairedTestCase] | None,
    checkpoint_dir: str | Path | None,
    pool_size: int | None,
    catalog=None,
) -> list[dict]:
    cases = test_cases if test_cases is not None else make_paired_tests(split.test)
    rows = []
    for value in values:
        changes = {param: value}
        if param == "k_random":
            changes["p_hard"] = 0.0
        tcfg = dataclasses.replace(train_config, **changes)
        model, report = train(split, model_config, tcfg)
        row = {
            param if param != "k_random" else "k": value,
            "accuracy": paired_accuracy(model, cases).value,
            "epochs_to_converge": report.epochs_to_converge,
            "best_epoch": report.best_epoch,
            "epochs_run": report.epochs_run,
        }
        if pool_size:
            row["mrr_up"], row["mrr_down"] = mrr(model, cases, min(pool_size, model_config.catalog_size - 1), tcfg.seed)
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"model_{param}_{value}.npz"
            save_checkpoint(path, model, catalog, extra={"train_config": dataclasses.asdict(tcfg)})
            row["checkpoint"] = path.name
        rows.append(row)
    return rows


def sweep_p_hard(
    values: Sequence[float],
    split: DatasetSplit,
    model_config: ModelConfig,
    train_config: TrainConfig,
    *,
    test_cases: Sequence[PairedTestCase] | None = None,
    checkpoint_dir: str | Path | None = None,
    pool_size: int | None = None,
    catalog=None,
) -> list[dict]:
    """One full train + test evaluation per ``p_hard`` value."""
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"p_hard value {v} outside [0, 1]")
    return _sweep("p_hard", values, split, model_config, train_config, test_cases, checkpoint_dir, pool_size, catalog)


def sweep_k(
    values: Sequence[int],
    split: DatasetSplit,
    model_config: ModelConfig,
    train_config: TrainConfig,
    *,
    test_cases: Sequence[PairedTestCase] | None = None,
    checkpoint_dir: str | Path | None = None,
    pool_size: int | None = None,
    catalog=None,
) -> list[dict]:
    """Hardest-of-k random negatives (no real negatives) for each ``k``."""
    for v in values:
        if not 1 <= v <= model_config.catalog_size - 1:
            raise ValueError(f"k={v} outside [1, catalog_size - 1]")
    return _sweep("k_random", values, split, model_config, train_config, test_cases, checkpoint_dir, pool_size, catalog)
