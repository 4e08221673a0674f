import math

import numpy as np
import pytest

from ctcnat.ctc import count_alignments
from ctcnat.data import SentencePair, batch_pairs, gen_synthetic, synthetic_vocab
from ctcnat.model import ConfigError, ModelConfig, init_params
from ctcnat.tensor import GradTape
from ctcnat.training import (
    Adam,
    Checkpoint,
    CheckpointError,
    FormatError,
    TrainConfig,
    average_checkpoints,
    batch_loss,
    feasible_pairs,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    sentence_loss,
    train,
    write_log_csv,
)


def small_config(**kw):
    base = dict(vocab_size=9, d_model=16, ff_dim=32, heads=2, enc_layers=1,
                dec_layers=1, k=2, variant="encoder-decoder", max_len=32, dropout_rate=0.0)
    base.update(kw)
    return ModelConfig(**base)


def small_corpus(n=24, seed=0, vocab_size=6, task="copy", len_range=(2, 4)):
    vocab = synthetic_vocab(vocab_size)
    return vocab, gen_synthetic(task, vocab_size, n, len_range, seed=seed, vocab=vocab)


class TestSchedule:
    def test_ramp_peak_decay(self):
        base, warmup = 1e-3, 100
        assert lr_at(1, base, warmup) == pytest.approx(base / warmup)
        assert lr_at(warmup, base, warmup) == pytest.approx(base)
        assert lr_at(4 * warmup, base, warmup) == pytest.approx(base / 2)
        assert lr_at(50, base, warmup) < base


class TestLosses:
    def test_one_adam_step_decreases_batch_loss(self):
        vocab, pairs = small_corpus()
        cfg = small_config(vocab_size=vocab.vocab_size)
        params = init_params(cfg, 0)
        batch = batch_pairs(pairs[:8])
        optimizer = Adam(params)
        with GradTape() as tape:
            loss = batch_loss(cfg, params, batch)
        before = loss.item()
        tape.backward(loss)
        optimizer.step(1e-2)
        with GradTape():
            after = batch_loss(cfg, params, batch).item()
        assert after < before

    def test_uniform_labeler_loss_equals_entropy_minus_alignment_mass(self):
        """With a uniform output distribution the lattice loss is exactly
        T*log(V+1) - log(#alignments)."""
        vocab, pairs = small_corpus(n=6, seed=3)
        cfg = small_config(vocab_size=vocab.vocab_size)
        params = init_params(cfg, 1)
        params["out.w"].data[:] = 0.0
        params["out.b"].data[:] = 0.0
        cols = cfg.vocab_size + 1
        for pair in pairs:
            loss = sentence_loss(cfg, params, pair.source_ids, pair.target_ids).item()
            T = cfg.k * len(pair.source_ids)
            want = T * math.log(cols) - math.log(count_alignments(T, pair.target_ids))
            assert loss == pytest.approx(want, abs=1e-9)
            assert loss <= T * math.log(cols) + 1e-12

    def test_uniform_labeler_loss_close_to_entropy_bound_on_tight_targets(self):
        """Targets that use every frame leave a single alignment, putting the
        step-0 loss within 20 percent of T*log(V+1)."""
        vocab = synthetic_vocab(8)
        cfg = small_config(vocab_size=vocab.vocab_size)
        params = init_params(cfg, 2)
        params["out.w"].data[:] = 0.0
        params["out.b"].data[:] = 0.0
        pairs = [SentencePair((4, 5), (6, 7, 8, 9), "", ""),
                 SentencePair((5, 6, 7), (4, 5, 6, 7, 8, 9), "", "")]
        cols = cfg.vocab_size + 1
        batch = batch_pairs(pairs)
        loss = batch_loss(cfg, params, batch).item()
        bound = sum(cfg.k * len(p.source_ids) for p in pairs) * math.log(cols) / len(pairs)
        assert loss <= bound
        assert (bound - loss) / bound < 0.20

    def test_batch_loss_is_mean_of_sentence_losses(self):
        """Padding introduced by batching never leaks into the loss."""
        vocab, pairs = small_corpus(n=5, seed=4, len_range=(1, 6))
        cfg = small_config(vocab_size=vocab.vocab_size)
        params = init_params(cfg, 3)
        batch = batch_pairs(pairs)
        batched = batch_loss(cfg, params, batch).item()
        unbatched = [sentence_loss(cfg, params, p.source_ids, p.target_ids).item() for p in pairs]
        assert batched == pytest.approx(sum(unbatched) / len(unbatched), abs=1e-9)

    def test_autoregressive_loss_matches_row_sums(self):
        vocab, pairs = small_corpus(n=3, seed=5)
        cfg = small_config(vocab_size=vocab.vocab_size, variant="autoregressive-baseline")
        params = init_params(cfg, 4)
        p = pairs[0]
        loss = sentence_loss(cfg, params, p.source_ids, p.target_ids).item()
        from ctcnat.data import EOS_ID
        from ctcnat.model import decode_autoregressive_full, encode

        enc = encode(cfg, params, p.source_ids)
        rows = decode_autoregressive_full(cfg, params, enc, p.target_ids).data
        want = -sum(rows[i, t - 1] for i, t in enumerate(list(p.target_ids) + [EOS_ID]))
        assert loss == pytest.approx(want, abs=1e-12)

    def test_autoregressive_target_must_not_contain_blank(self):
        from ctcnat.data import VocabularyError

        cfg = small_config(variant="autoregressive-baseline")
        params = init_params(cfg, 4)
        with pytest.raises(VocabularyError):
            sentence_loss(cfg, params, (4, 5), (4, 0))


class TestFeasibility:
    def test_counts_skipped_pairs(self):
        cfg = small_config(k=1)
        pairs = [SentencePair((4,), (4, 5), "", ""),  # needs 2 frames, has 1
                 SentencePair((4, 5), (4, 5), "", "")]
        kept, skipped = feasible_pairs(cfg, pairs)
        assert skipped == 1 and len(kept) == 1

    def test_repeat_separators_count(self):
        cfg = small_config(k=1)
        # target aa needs 3 frames, source gives 2
        pairs = [SentencePair((4, 5), (4, 4), "", "")]
        kept, skipped = feasible_pairs(cfg, pairs)
        assert skipped == 1

    def test_all_infeasible_raises_with_suggestion(self, tmp_path):
        vocab = synthetic_vocab(6)
        pairs = [SentencePair((4,), (4, 5, 6), "", "")]
        cfg = small_config(vocab_size=vocab.vocab_size, k=1)
        tc = TrainConfig(max_steps=2, validation_interval=1,
                         checkpoint_dir=str(tmp_path), warmup=1)
        with pytest.raises(ConfigError, match="k"):
            train(cfg, pairs, pairs, tc, vocab)


class TestTrainLoop:
    def test_determinism(self, tmp_path):
        vocab, pairs = small_corpus(n=20, seed=6)
        cfg = small_config(vocab_size=vocab.vocab_size)
        losses = []
        for run in range(2):
            tc = TrainConfig(max_steps=10, validation_interval=5, batch_size=4,
                             checkpoint_dir=str(tmp_path / f"run{run}"), seed=123, warmup=5)
            _, log = train(cfg, pairs[:16], pairs[16:], tc, vocab)
            losses.append([row.train_loss for row in log])
        assert losses[0] == losses[1]

    def test_retention_keeps_top_scores(self, tmp_path):
        vocab, pairs = small_corpus(n=20, seed=7)
        cfg = small_config(vocab_size=vocab.vocab_size)
        tc = TrainConfig(max_steps=12, validation_interval=2, batch_size=4, keep_top=3,
                         checkpoint_dir=str(tmp_path), seed=1, warmup=5)
        final, log = train(cfg, pairs[:16], pairs[16:], tc, vocab)
        files = sorted(tmp_path.glob("ckpt-*.bin"))
        assert len(files) <= 3
        scores = sorted((row.valid_bleu for row in log if row.valid_bleu is not None), reverse=True)
        kept_scores = sorted((load_checkpoint(f).valid_score for f in files), reverse=True)
        assert kept_scores == pytest.approx(scores[: len(kept_scores)], abs=1e-9)

    def test_log_csv_layout(self, tmp_path):
        vocab, pairs = small_corpus(n=12, seed=8)
        cfg = small_config(vocab_size=vocab.vocab_size)
        tc = TrainConfig(max_steps=4, validation_interval=2, batch_size=4,
                         checkpoint_dir=str(tmp_path), seed=2, warmup=2)
        _, log = train(cfg, pairs[:8], pairs[8:], tc, vocab)
        path = tmp_path / "log.csv"
        write_log_csv(log, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,train_loss,valid_bleu"
        assert len(lines) == 5
        assert lines[2].split(",")[2] != ""  # validation step has a BLEU entry
        assert lines[1].split(",")[2] == ""


class TestAveraging:
    def _checkpoint(self, cfg, params, step=1, score=1.0):
        return Checkpoint(cfg, params, step, score)

    def test_identical_checkpoints_average_to_themselves(self):
        cfg = small_config()
        params = init_params(cfg, 5)
        ckpts = [self._checkpoint(cfg, params) for _ in range(4)]
        avg = average_checkpoints(ckpts)
        assert all(np.array_equal(avg[n].data, params[n].data) for n in params)

    def test_mean_of_p_and_3p(self):
        cfg = small_config()
        p1 = init_params(cfg, 6)
        p3 = {n: type(t)(3.0 * t.data, requires_grad=True) for n, t in p1.items()}
        avg = average_checkpoints([self._checkpoint(cfg, p1), self._checkpoint(cfg, p3)])
        assert all(np.allclose(avg[n].data, 2.0 * p1[n].data, atol=1e-15) for n in p1)

    def test_order_invariance_within_tolerance(self):
        cfg = small_config()
        rng = np.random.default_rng(9)
        ckpts = [self._checkpoint(cfg, init_params(cfg, int(s))) for s in rng.integers(0, 999, size=5)]
        fwd = average_checkpoints(ckpts)
        rev = average_checkpoints(ckpts[::-1])
        for n in fwd:
            assert np.abs(fwd[n].data - rev[n].data).max() < 1e-12

    def test_config_mismatch(self):
        a = small_config()
        b = small_config(k=3)
        with pytest.raises(CheckpointError):
            average_checkpoints([self._checkpoint(a, init_params(a, 0)),
                                 self._checkpoint(b, init_params(b, 0))])


class TestCheckpointIO:
    def test_round_trip_is_bit_exact(self, tmp_path):
        cfg = small_config()
        params = init_params(cfg, 10)
        path = tmp_path / "model.bin"
        save_checkpoint(Checkpoint(cfg, params, step=42, valid_score=87.125), path)
        loaded = load_checkpoint(path)
        assert loaded.config == cfg
        assert loaded.step == 42
        assert loaded.valid_score == 87.125
        assert set(loaded.params) == set(params)
        for name in params:
            assert loaded.params[name].data.tobytes() == params[name].data.tobytes()

    def test_save_is_deterministic(self, tmp_path):
        cfg = small_config()
        params = init_params(cfg, 11)
        ckpt = Checkpoint(cfg, params, 7, 3.5)
        save_checkpoint(ckpt, tmp_path / "a.bin")
        save_checkpoint(ckpt, tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_truncated_file(self, tmp_path):
        cfg = small_config()
        path = tmp_path / "model.bin"
        save_checkpoint(Checkpoint(cfg, init_params(cfg, 12), 1, 0.0), path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError, match="offset"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.bin"
        path.write_bytes(b"NOTCTC00" + b"\x00" * 32)
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_variant_mismatch_against_expected_config(self, tmp_path):
        deep = small_config(variant="deep-encoder", enc_layers=2, dec_layers=0)
        path = tmp_path / "deep.bin"
        save_checkpoint(Checkpoint(deep, init_params(deep, 13), 1, 0.0), path)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expected_config=small_config())

    def test_tampered_parameter_set(self, tmp_path):
        cfg = small_config()
        params = init_params(cfg, 14)
        del params["out.b"]
        path = tmp_path / "model.bin"
        save_checkpoint(Checkpoint(cfg, params, 1, 0.0), path)
        with pytest.raises(CheckpointError, match="out.b"):
            load_checkpoint(path)
