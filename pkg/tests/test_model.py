import hashlib
import math

import numpy as np
import pytest
import torch
from oracles import finite_difference_errors, random_sequence, tiny_model

from negrec.data import Catalog, FeedbackEvent, FeedbackType, UserSequence
from negrec.model import (
    ModelConfig,
    SequenceScorer,
    backward,
    batch_loss,
    bce_pair_loss,
    collate,
    forward,
    hardest_of_k,
    inference_example,
    load_checkpoint,
    resolve_negatives,
    save_checkpoint,
)
from negrec.sampling import MaskPlan, assemble_example, draw_example

UP, DOWN, SKIP = FeedbackType.UP, FeedbackType.DOWN, FeedbackType.SKIP


def example(songs, feedback, masked, negatives, catalog_size=20, stations=None):
    events = tuple(
        FeedbackEvent("u", s, (stations or [1] * len(songs))[i], fb, 100 * i) for i, (s, fb) in enumerate(zip(songs, feedback))
    )
    seq = UserSequence("u", events)
    return assemble_example(seq, MaskPlan(tuple(masked)), [np.array(n) for n in negatives], mask_token=catalog_size)


def scores(model, ex, songs):
    model.eval()
    with torch.no_grad():
        return forward(model, ex).score(torch.as_tensor(songs)).numpy()


class TestForward:
    def test_zero_parameters_give_zero_scores(self):
        model = SequenceScorer(ModelConfig(20, 3, d_model=8, max_len=16))
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        ex = example([1, 2, 3, 4], [UP, SKIP, UP, UP], [2, 3], [[5], [6]])
        assert np.all(scores(model, ex, [5, 6]) == 0.0)

    def test_no_positional_is_permutation_invariant(self):
        cfg = ModelConfig(20, 3, d_model=8, max_len=16, use_positional=False, seed=3)
        model = SequenceScorer(cfg)
        a = example([1, 2, 3, 4, 5], [UP, SKIP, DOWN, UP, UP], [4], [[7]])
        b = example([3, 2, 1, 4, 5], [DOWN, SKIP, UP, UP, UP], [4], [[7]])
        np.testing.assert_allclose(scores(model, a, [7, 9]), scores(model, b, [7, 9]), rtol=1e-6, atol=1e-7)
        with_pos = SequenceScorer(ModelConfig(20, 3, d_model=8, max_len=16, seed=3))
        assert not np.allclose(scores(with_pos, a, [7, 9]), scores(with_pos, b, [7, 9]))

    def test_positive_only_ignores_feedback_labels(self):
        cfg = ModelConfig(20, 3, d_model=8, max_len=16, positive_only=True, seed=1)
        model = SequenceScorer(cfg)
        a = example([1, 2, 3], [UP, SKIP, UP], [2], [[7]])
        b = example([1, 2, 3], [UP, DOWN, UP], [2], [[7]])
        np.testing.assert_array_equal(scores(model, a, [7]), scores(model, b, [7]))

    def test_single_position_hand_computed(self):
        cfg = ModelConfig(5, 2, d_model=2, n_layers=1, n_heads=1, max_len=4, dropout=0.0, seed=7, ffn_mult=2)
        model = SequenceScorer(cfg).double()
        gen = torch.Generator().manual_seed(0)
        with torch.no_grad():
            for p in model.parameters():
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64))
        P = {k: v.detach().numpy() for k, v in model.named_parameters()}
        ex = example([3], [UP], [0], [[1]], catalog_size=5, stations=[2])

        def ln(v, w, b):
            return (v - v.mean()) / math.sqrt(v.var() + 1e-5) * w + b

        def gelu(v):
            return np.array([0.5 * t * (1 + math.erf(t / math.sqrt(2))) for t in v])

        x = P["song_emb.weight"][5] + P["station_emb.weight"][2] + P["feedback_emb.weight"][0] + P["pos_emb.weight"][0]
        a = ln(x, P["layers.0.norm1.weight"], P["layers.0.norm1.bias"])
        v = (P["layers.0.attn.qkv.weight"] @ a + P["layers.0.attn.qkv.bias"])[4:6]
        # one key, so the attention weight is exactly 1
        x = x + P["layers.0.attn.out.weight"] @ v + P["layers.0.attn.out.bias"]
        c = ln(x, P["layers.0.norm2.weight"], P["layers.0.norm2.bias"])
        h = gelu(P["layers.0.ff1.weight"] @ c + P["layers.0.ff1.bias"])
        x = x + P["layers.0.ff2.weight"] @ h + P["layers.0.ff2.bias"]
        f = ln(x, P["final_norm.weight"], P["final_norm.bias"])
        expected = P["song_emb.weight"][:5] @ f
        np.testing.assert_allclose(scores(model, ex, list(range(5))), expected, rtol=1e-10, atol=1e-12)

    def test_padding_does_not_leak(self):
        model = SequenceScorer(ModelConfig(20, 3, d_model=8, max_len=16, seed=2)).eval()
        short = example([1, 2], [UP, UP], [1], [[5]])
        long = example([4, 5, 6, 7, 8, 9], [UP, SKIP, UP, DOWN, UP, UP], [2, 5], [[1], [2]])
        with torch.no_grad():
            together = forward(model, collate([short, long])).score(torch.tensor([5, 1, 2]))
            alone = torch.cat([forward(model, short).score(torch.tensor([5])),
                               forward(model, long).score(torch.tensor([1, 2]))])
        torch.testing.assert_close(together, alone, rtol=1e-5, atol=1e-6)

    def test_range_checks(self):
        model = SequenceScorer(ModelConfig(20, 3, d_model=8, max_len=4))
        with pytest.raises(IndexError):
            forward(model, example([1, 2], [UP, UP], [1], [[5]], stations=[1, 9]))
        with pytest.raises(ValueError):
            forward(model, example([1, 2, 3, 4, 5], [UP] * 5, [4], [[6]]))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(10, 2, d_model=10, n_heads=3)

    def test_inference_example(self):
        cfg = ModelConfig(20, 3, max_len=4)
        ctx = UserSequence("u", tuple(FeedbackEvent("u", i, 1, UP if i % 2 else SKIP, i) for i in range(6)))
        ex = inference_example(ctx, 2, cfg)
        assert ex.songs.tolist() == [3, 4, 5, 20] and ex.stations[-1] == 2 and ex.feedback[-1] == UP
        assert ex.slots.tolist() == [3] and ex.positions.tolist() == [3, 2, 1, 0]
        ex = inference_example(ctx, 2, ModelConfig(20, 3, max_len=8, positive_only=True))
        assert ex.songs.tolist() == [1, 3, 5, 20]


class TestLoss:
    def test_values(self):
        assert bce_pair_loss(0.0, 0.0) == pytest.approx(2 * math.log(2), abs=1e-12)
        assert bce_pair_loss(1.0, -1.0) == pytest.approx(0.6265233750364456, abs=1e-12)
        assert bce_pair_loss(1e4, -1e4) == 0.0
        assert math.isfinite(bce_pair_loss(-1e4, 1e4))

    def test_tensor_matches_float(self):
        pos, neg = torch.tensor([0.0, 1.0, 30.0]), torch.tensor([0.0, -1.0, -800.0])
        out = bce_pair_loss(pos, neg)
        assert out.tolist() == pytest.approx([bce_pair_loss(p, n) for p, n in zip(pos.tolist(), neg.tolist())])


class TestHardestOfK:
    def test_single(self):
        assert int(hardest_of_k(torch.tensor([0.3]), torch.tensor([9]))) == 9

    def test_known_scores(self):
        assert int(hardest_of_k(torch.tensor([0.1, 0.9]), torch.tensor([4, 2]))) == 2

    def test_ties_lowest_id(self):
        assert int(hardest_of_k(torch.tensor([0.5, 0.5, 0.1]), torch.tensor([8, 3, 1]))) == 3

    def test_brute_force(self):
        model = SequenceScorer(ModelConfig(3000, 3, d_model=8, max_len=16)).eval()
        ex = example([1, 2, 3], [UP, SKIP, UP], [2], [[0]], catalog_size=3000)
        cand = torch.from_numpy(np.random.default_rng(0).choice(3000, 1000, replace=False))
        with torch.no_grad():
            out = forward(model, ex)
            each = [float(out.score(torch.tensor([int(c)]))[0]) for c in cand]
            pick = int(hardest_of_k(out.score(cand[None])[0], cand))
        assert pick == int(cand[int(np.argmax(each))])

    def test_resolve_paths_agree(self):
        model = SequenceScorer(ModelConfig(500, 3, d_model=8, max_len=16)).eval()
        ex = example([1, 2, 3], [UP, SKIP, UP], [0, 2], [list(range(40, 100)), list(range(200, 260))], catalog_size=500)
        with torch.no_grad():
            out = forward(model, ex)
            negs = torch.from_numpy(ex.negatives)
            wide = resolve_negatives(out, negs, 500)
            narrow = hardest_of_k(out.score(negs), negs)
        assert wide.tolist() == narrow.tolist()


class TestGradients:
    def test_finite_differences(self):
        model, batch = tiny_model(0)
        errors = finite_difference_errors(model, batch)
        assert max(errors.values()) < 1e-4

    def test_difference_error_is_truncation(self):
        # a sharply curved config: the error shrinks as step**2, so the gradient itself is exact
        model, batch = tiny_model(43, d_model=4)
        coarse = finite_difference_errors(model, batch, step=1e-3)["layers.0.attn.qkv.bias"]
        fine = finite_difference_errors(model, batch, step=1e-4)["layers.0.attn.qkv.bias"]
        assert 1e-5 < coarse and 80 < coarse / fine < 120

    def test_untouched_rows_are_zero(self):
        model = SequenceScorer(ModelConfig(30, 5, d_model=8, max_len=16, dropout=0.0))
        ex = example([1, 2, 3, 4], [UP, SKIP, UP, UP], [2, 3], [[7], [8]], catalog_size=30, stations=[1, 1, 2, 2])
        grads = backward(model, ex)
        touched = {1, 2, 3, 4, 7, 8, 30}
        song = grads["song_emb.weight"].abs().sum(1)
        assert all(bool(song[i] == 0) == (i not in touched) for i in range(31)), song
        assert grads["station_emb.weight"].abs().sum(1)[[0, 3, 4, 5]].eq(0).all()
        assert grads["feedback_emb.weight"].abs().sum(1)[[1, 3]].eq(0).all()
        assert grads["pos_emb.weight"].abs().sum(1)[4:].eq(0).all()
        assert set(grads) == {n for n, _ in model.named_parameters()}

    def test_saturated_loss_has_vanishing_gradient(self):
        model = SequenceScorer(ModelConfig(10, 2, d_model=8, max_len=4, dropout=0.0)).double()
        ex = example([3], [UP], [0], [[6]], catalog_size=10)
        with torch.no_grad():
            c = forward(model, ex).contextual[0]
            model.song_emb.weight[3] = 40 * c / c.dot(c)
            model.song_emb.weight[6] = -40 * c / c.dot(c)
        loss, _ = batch_loss(model, collate([ex]))
        assert float(loss.detach()) < 1e-15
        norm = math.sqrt(sum(float(g.pow(2).sum()) for g in backward(model, ex).values()))
        assert norm < 1e-6

    def test_deterministic_trajectory(self):
        def run():
            model = SequenceScorer(ModelConfig(40, 3, d_model=16, max_len=32, seed=4))
            opt = torch.optim.Adam(model.parameters(), lr=1e-2)
            rng = np.random.default_rng(0)
            seqs = [random_sequence(np.random.default_rng(i), n_songs=40) for i in range(8)]
            torch.manual_seed(0)
            losses = []
            for _ in range(10):
                batch = collate([draw_example(s, rng, catalog_size=40, p_task=0.3, p_hard=0.5) for s in seqs])
                loss, _ = batch_loss(model, batch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(loss.item())
            return losses

        assert run() == run()


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = SequenceScorer(ModelConfig(25, 4, d_model=8, max_len=16, seed=9, use_positional=False))
        catalog = Catalog([f"s{i}" for i in range(25)], ["", "a", "b", "c", "d"])
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, model, catalog, {"epoch": 3})
        loaded, cat, extra = load_checkpoint(path)
        assert loaded.config == model.config and extra == {"epoch": 3}
        assert cat.songs == catalog.songs and cat.stations == catalog.stations
        for (n, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
            assert torch.equal(a, b), n
        again = tmp_path / "again.npz"
        save_checkpoint(again, loaded, cat, {"epoch": 3})
        assert hashlib.sha256(path.read_bytes()).digest() == hashlib.sha256(again.read_bytes()).digest()

    def test_float64_round_trip(self, tmp_path):
        model = SequenceScorer(ModelConfig(5, 1, d_model=4, max_len=4)).double()
        save_checkpoint(tmp_path / "c.npz", model)
        loaded, cat, _ = load_checkpoint(tmp_path / "c.npz")
        assert cat is None and next(loaded.parameters()).dtype == torch.float64

    def test_same_seed_same_init(self):
        a = SequenceScorer(ModelConfig(25, 4, d_model=8, seed=5))
        b = SequenceScorer(ModelConfig(25, 4, d_model=8, seed=5))
        assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
