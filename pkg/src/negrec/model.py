"""Bidirectional transformer scorer over feedback sequences.

Each input position is the sum of song, station, feedback and positional
embeddings. A masked slot carries the mask song token with the target's
station and an Up feedback type; its contextual vector scores candidate
songs by dot product with the (tied) song table.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Catalog, FeedbackType, UserSequence
from .sampling import TrainingExample

CHECKPOINT_VERSION = 1
N_FEEDBACK = 4


@dataclass(frozen=True)
class ModelConfig:
    catalog_size: int
    station_count: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 64
    dropout: float = 0.1
    seed: int = 0
    use_positional: bool = True
    # drop Down/Skip inputs and the feedback table
    positive_only: bool = False
    ffn_mult: int = 4

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.catalog_size < 1 or self.station_count < 0 or self.max_len < 1:
            raise ValueError("catalog_size, station_count and max_len must be positive")

    @property
    def mask_token(self) -> int:
        return self.catalog_size


@dataclass
class Batch:
    songs: torch.Tensor
    stations: torch.Tensor
    feedback: torch.Tensor
    positions: torch.Tensor
    padding: torch.Tensor
    slot_rows: torch.Tensor
    slot_cols: torch.Tensor
    positives: torch.Tensor
    negatives: torch.Tensor
    sources: torch.Tensor

    @property
    def n_slots(self) -> int:
        return int(self.slot_rows.shape[0])


def collate(examples: Sequence[TrainingExample]) -> Batch:
    """Right-pad examples into one batch."""
    B = len(examples)
    L = max(len(ex) for ex in examples)
    songs = np.zeros((B, L), dtype=np.int64)
    stations = np.zeros((B, L), dtype=np.int64)
    feedback = np.zeros((B, L), dtype=np.int64)
    positions = np.zeros((B, L), dtype=np.int64)
    padding = np.ones((B, L), dtype=bool)
    k = max(ex.negatives.shape[1] for ex in examples)
    rows, cols, pos, neg, src = [], [], [], [], []
    for b, ex in enumerate(examples):
        n = len(ex)
        songs[b, :n] = ex.songs
        stations[b, :n] = ex.stations
        feedback[b, :n] = ex.feedback
        positions[b, :n] = ex.positions
        padding[b, :n] = False
        rows.append(np.full(len(ex.slots), b, dtype=np.int64))
        cols.append(ex.slots)
        pos.append(ex.positives)
        nk = ex.negatives
        if nk.shape[1] != k:
            nk = np.repeat(nk[:, :1], k, axis=1) if nk.shape[1] == 1 else nk
        neg.append(nk)
        src.append(ex.sources)
    t = torch.from_numpy
    return Batch(
        t(songs), t(stations), t(feedback), t(positions), t(padding),
        t(np.concatenate(rows)), t(np.concatenate(cols)), t(np.concatenate(pos)),
        t(np.concatenate(neg)), t(np.concatenate(src)),
    )


def inference_example(
    context: UserSequence,
    station: int,
    config: ModelConfig,
) -> TrainingExample:
    """Context events followed by one masked slot on ``station``."""
    events = context.events
    if config.positive_only:
        events = tuple(e for e in events if e.feedback is FeedbackType.UP)
    events = events[len(events) - (config.max_len - 1):] if len(events) > config.max_len - 1 else events
    n = len(events) + 1
    songs = np.fromiter((e.song_id for e in events), dtype=np.int64, count=n - 1)
    stations = np.fromiter((e.station_id for e in events), dtype=np.int64, count=n - 1)
    feedback = np.fromiter((int(e.feedback) for e in events), dtype=np.int64, count=n - 1)
    return TrainingExample(
        songs=np.append(songs, config.mask_token),
        stations=np.append(stations, station),
        feedback=np.append(feedback, int(FeedbackType.UP)),
        positions=np.arange(n - 1, -1, -1, dtype=np.int64),
        slots=np.array([n - 1], dtype=np.int64),
        positives=np.zeros(1, dtype=np.int64),
        negatives=np.zeros((1, 1), dtype=np.int64),
        sources=np.zeros(1, dtype=np.int64),
    )


class SelfAttention(nn.Module):
    """Multi-head self-attention over all non-padding positions (no causal mask)."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, padding: torch.Tensor) -> torch.Tensor:
        B, L, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).view(B, L, 3, h, d // h).permute(2, 0, 3, 1, 4)
        keep = ~padding[:, None, None, :]
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=keep)
        return self.out(y.transpose(1, 2).reshape(B, L, d))


class EncoderLayer(nn.Module):
    """Pre-norm block: attention then GELU feed-forward, both residual."""

    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff1 = nn.Linear(d_model, ffn_dim)
        self.ff2 = nn.Linear(ffn_dim, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, padding: torch.Tensor) -> torch.Tensor:
        x = x + self.drop(self.attn(self.norm1(x), padding))
        x = x + self.drop(self.ff2(F.gelu(self.ff1(self.norm2(x)))))
        return x


@dataclass
class ScoreOutput:
    contextual: torch.Tensor
    song_table: torch.Tensor

    def score(self, songs: torch.Tensor) -> torch.Tensor:
        """Scores for ``songs`` of shape ``(S,)`` or ``(S, k)``."""
        emb = self.song_table[songs]
        if songs.dim() == 1:
            return (self.contextual * emb).sum(-1)
        return torch.einsum("sd,skd->sk", self.contextual, emb)

    def score_all(self, n_songs: int) -> torch.Tensor:
        return self.contextual @ self.song_table[:n_songs].T


class SequenceScorer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.song_emb = nn.Embedding(config.catalog_size + 1, d)
            self.station_emb = nn.Embedding(config.station_count + 1, d)
            self.feedback_emb = nn.Embedding(N_FEEDBACK, d)
            self.pos_emb = nn.Embedding(config.max_len, d)
            self.layers = nn.ModuleList(
                EncoderLayer(d, config.n_heads, config.ffn_mult * d, config.dropout)
                for _ in range(config.n_layers)
            )
            self.final_norm = nn.LayerNorm(d)
            self.drop = nn.Dropout(config.dropout)
            for emb in (self.song_emb, self.station_emb, self.feedback_emb, self.pos_emb):
                nn.init.normal_(emb.weight, std=0.05)
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    nn.init.xavier_uniform_(module.weight)
                    nn.init.zeros_(module.bias)

    def embed(self, batch: Batch) -> torch.Tensor:
        x = self.song_emb(batch.songs) + self.station_emb(batch.stations)
        if not self.config.positive_only:
            x = x + self.feedback_emb(batch.feedback)
        if self.config.use_positional:
            x = x + self.pos_emb(batch.positions)
        return self.drop(x)

    def encode(self, batch: Batch) -> torch.Tensor:
        if batch.songs.shape[1] > self.config.max_len:
            raise ValueError(f"input length {batch.songs.shape[1]} exceeds max_len {self.config.max_len}")
        x = self.embed(batch)
        for layer in self.layers:
            x = layer(x, batch.padding)
        return self.final_norm(x)

    def forward(self, batch: Batch) -> ScoreOutput:
        hidden = self.encode(batch)
        return ScoreOutput(hidden[batch.slot_rows, batch.slot_cols], self.song_emb.weight)


def forward(params: SequenceScorer, example: TrainingExample | Batch) -> ScoreOutput:
    batch = example if isinstance(example, Batch) else collate([example])
    n = params.config.catalog_size
    for name, ids, hi in (
        ("song", batch.songs, n),
        ("station", batch.stations, params.config.station_count),
        ("feedback", batch.feedback, N_FEEDBACK - 1),
    ):
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) > hi):
            raise IndexError(f"{name} id out of range [0, {hi}]")
    return params(batch)


def bce_pair_loss(score_pos, score_neg):
    """``-log sigmoid(pos) - log(1 - sigmoid(neg))`` written with softplus."""
    if isinstance(score_pos, torch.Tensor) or isinstance(score_neg, torch.Tensor):
        return F.softplus(-torch.as_tensor(score_pos)) + F.softplus(torch.as_tensor(score_neg))
    return _softplus(-float(score_pos)) + _softplus(float(score_neg))


def _softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def hardest_of_k(scores: torch.Tensor, candidates: torch.Tensor) -> torch.Tensor:
    """Per row, the candidate with the highest score; ties go to the lowest id.

    ``scores`` and ``candidates`` are ``(S, k)`` (a single row may be 1-D).
    """
    squeeze = scores.dim() == 1
    if squeeze:
        scores, candidates = scores[None], candidates[None]
    best = scores.max(dim=1, keepdim=True).values
    big = torch.iinfo(candidates.dtype).max
    pick = torch.where(scores == best, candidates, torch.full_like(candidates, big)).min(dim=1).values
    return pick[0] if squeeze else pick


def resolve_negatives(out: ScoreOutput, negatives: torch.Tensor, n_songs: int) -> torch.Tensor:
    """Collapse ``(S, k)`` candidates to one negative id per slot by hardest-of-k."""
    if negatives.shape[1] == 1:
        return negatives[:, 0]
    with torch.no_grad():
        if negatives.shape[1] > 32:
            scores = out.score_all(n_songs).gather(1, negatives)
        else:
            scores = out.score(negatives)
    return hardest_of_k(scores, negatives)


def batch_loss(params: SequenceScorer, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean pair loss over all masked slots and the resolved negative ids."""
    out = forward(params, batch)
    neg_ids = resolve_negatives(out, batch.negatives, params.config.catalog_size)
    loss = bce_pair_loss(out.score(batch.positives), out.score(neg_ids)).mean()
    return loss, neg_ids


def backward(params: SequenceScorer, example: TrainingExample | Batch, loss: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
    """Exact gradients of the example's mean pair loss for every parameter tensor."""
    batch = example if isinstance(example, Batch) else collate([example])
    if loss is None:
        loss, _ = batch_loss(params, batch)
    names, tensors = zip(*params.named_parameters())
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {
        name: (g if g is not None else torch.zeros_like(p))
        for name, p, g in zip(names, tensors, grads)
    }


def save_checkpoint(path: str | Path, params: SequenceScorer, catalog: Catalog | None = None, extra: dict | None = None) -> None:
    """Write config, weights and catalog id maps into one ``.npz`` container."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in params.state_dict().items()}
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(params.config),
        "dtype": str(next(params.parameters()).dtype).replace("torch.", ""),
        "extra": extra or {},
    }
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    if catalog is not None:
        arrays["catalog/songs"] = np.array(catalog.songs, dtype=str)
        arrays["catalog/stations"] = np.array(catalog.stations, dtype=str)
    # fixed entry timestamps keep the file digest-stable across runs
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[SequenceScorer, Catalog | None, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        model = SequenceScorer(ModelConfig(**meta["config"]))
        if meta["dtype"] == "float64":
            model = model.double()
        state = {k[len("param/"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
        model.load_state_dict(state)
        catalog = None
        if "catalog/songs" in data.files:
            catalog = Catalog(list(data["catalog/songs"].tolist()), list(data["catalog/stations"].tolist()))
    return model, catalog, meta.get("extra", {})
