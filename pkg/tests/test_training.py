import struct

import numpy as np
import pytest

from mwer_rescore import nn_core as nn
from mwer_rescore import simulator as sim
from mwer_rescore.lm import LmConfig, RescoreModel, batch_scores, encode_tokens
from mwer_rescore.training import (
    SGD,
    Adam,
    Checkpoint,
    CheckpointError,
    CheckpointVersionError,
    TrainConfig,
    clip_gradients,
    init_from_pretrained,
    load_checkpoint,
    mwer_step_loss,
    prepare_mwer_batch,
    pretrain_xent,
    save_checkpoint,
    train_mwer,
)


@pytest.fixture(scope="module")
def task():
    return sim.generate_task(sizes={"train": 24, "dev": 12}, config=sim.SimConfig(dim=8), seed=2, text_size=40)


def small_config(task, **kw):
    base = dict(embed_dim=6, hidden_dim=8, context_dim=4, attention_dim=3, audio_dim=task.config.dim)
    base.update(kw)
    return LmConfig(vocab_size=len(task.vocab), **base)


class TestCheckpoint:
    def _ckpt(self, task, **kw):
        return Checkpoint.from_model(RescoreModel(small_config(task, **kw), seed=4), task.vocab.hash, {"note": np.int64(3)})

    def test_round_trip_is_bit_identical(self, task, tmp_path):
        ck = self._ckpt(task, attention="a3", encoder="cnn")
        save_checkpoint(ck, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert back.config == ck.config and back.vocab_hash == ck.vocab_hash
        assert back.metadata == {"note": 3}
        for k, v in ck.params.items():
            assert np.array_equal(back.params[k], v) and back.params[k].dtype == np.float64
        utt = task.splits["dev"][0]
        seqs = [encode_tokens(h.words, task.vocab) for h in utt.nbest.hyps]
        a = batch_scores(ck.model(), seqs, [utt.frames], [0] * len(seqs))
        b = batch_scores(back.model(), seqs, [utt.frames], [0] * len(seqs))
        assert np.array_equal(a, b)

    def test_truncated_file(self, task, tmp_path):
        save_checkpoint(self._ckpt(task), tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        for cut in (10, len(raw) // 2, len(raw) - 1):
            (tmp_path / "t.ckpt").write_bytes(raw[:cut])
            with pytest.raises(CheckpointError):
                load_checkpoint(tmp_path / "t.ckpt")

    def test_corrupt_byte(self, task, tmp_path):
        save_checkpoint(self._ckpt(task), tmp_path / "m.ckpt")
        raw = bytearray((tmp_path / "m.ckpt").read_bytes())
        raw[-20] ^= 0xFF
        (tmp_path / "c.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_future_version(self, task, tmp_path):
        save_checkpoint(self._ckpt(task), tmp_path / "m.ckpt")
        raw = bytearray((tmp_path / "m.ckpt").read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        (tmp_path / "v.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError, match="99"):
            load_checkpoint(tmp_path / "v.ckpt")

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"hello world, this is not it")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.ckpt")


class TestOptimizers:
    def test_sgd_step_is_exact(self):
        p = nn.parameter(np.array([1.0, -2.0]))
        p.grad = np.array([0.5, 0.25])
        SGD({"p": p}, 0.1).step()
        np.testing.assert_array_equal(p.value, [1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25])

    def test_adam_first_step_moves_by_lr(self):
        p = nn.parameter(np.array([1.0, -2.0]))
        p.grad = np.array([3.0, -1e-3])
        Adam({"p": p}, 0.01).step()
        np.testing.assert_allclose(p.value, [0.99, -1.99], atol=1e-7)

    def test_zero_lr_leaves_params(self):
        p = nn.parameter(np.array([1.0]))
        p.grad = np.array([5.0])
        for opt in (SGD({"p": p}, 0.0), Adam({"p": p}, 0.0)):
            opt.step()
        assert p.value[0] == 1.0

    def test_clip(self):
        a, b = nn.parameter(np.zeros(2)), nn.parameter(np.zeros(1))
        a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
        assert clip_gradients({"a": a, "b": b}, 1.0) == pytest.approx(5.0)
        assert np.sqrt(np.sum(a.grad**2) + np.sum(b.grad**2)) == pytest.approx(1.0)
        a.grad = np.array([0.3, 0.0])
        b.grad = np.array([0.4])
        clip_gradients({"a": a, "b": b}, 1.0)
        np.testing.assert_array_equal(a.grad, [0.3, 0.0])

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=-1)
        with pytest.raises(ValueError):
            TrainConfig(optimizer="rmsprop")
        with pytest.raises(ValueError):
            TrainConfig(max_nbest=65)
        assert TrainConfig.from_dict({"lr": 0.5, "unknown": 1}).lr == 0.5


class TestMwerTraining:
    def test_batch_layout(self, task):
        utts = task.splits["train"][:3]
        b = prepare_mwer_batch(utts, task.vocab, 64, with_audio=True, with_refs=True)
        assert b.n_hyps == sum(len(u.nbest) for u in utts)
        assert b.tokens.ids.shape[0] == b.n_hyps + 3
        assert b.audio.frames.shape[0] == 3
        np.testing.assert_allclose(b.layout.rel_err.sum(axis=1), 0.0, atol=1e-12)

    def test_truncation_warns(self, task):
        with pytest.warns(UserWarning, match="truncated"):
            b = prepare_mwer_batch(task.splits["train"][:2], task.vocab, 3, with_audio=False, with_refs=False)
        assert b.layout.mask.sum() == 6

    def test_full_batch_sgd_lowers_loss(self, task):
        model = RescoreModel(small_config(task, head="unnormalized"), seed=0)
        batch = prepare_mwer_batch(task.splits["train"], task.vocab, 64, False, True)
        opt = SGD(model.params, 0.05)
        losses = []
        for _ in range(6):
            model.zero_grad()
            with nn.Tape() as tape:
                loss, _ = mwer_step_loss(model, batch, 1.0, 0.1)
            nn.backward(tape, loss)
            opt.step()
            losses.append(loss.item())
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_equal_errors_zero_gradient(self, task):
        u = task.splits["train"][0]
        flat = sim.Utterance(u.id, u.ref, u.frames, sim.NBestList(u.id, u.ref, [h for h in u.nbest.hyps if h.words != u.ref][:3]))
        errs = flat.errors()
        if len(set(errs)) != 1:
            keep = [h for h, e in zip(flat.nbest.hyps, errs) if e == errs[0]]
            flat = sim.Utterance(u.id, u.ref, u.frames, sim.NBestList(u.id, u.ref, keep))
        model = RescoreModel(small_config(task), seed=0)
        batch = prepare_mwer_batch([flat], task.vocab, 64, False, False)
        with nn.Tape() as tape:
            loss, _ = mwer_step_loss(model, batch, 1.0, 0.0)
        nn.backward(tape, loss)
        assert abs(loss.item()) < 1e-12
        assert max(np.abs(p.grad).max() for p in model.params.values() if p.grad is not None) < 1e-10

    def test_lr_zero_keeps_model(self, task):
        model = RescoreModel(small_config(task, head="unnormalized", attention="a3"), seed=1)
        before = model.state()
        ck = train_mwer(task.splits["train"], task.splits["dev"], model, task.vocab, TrainConfig(lr=0.0, epochs=1))
        for k, v in before.items():
            assert np.array_equal(ck.params[k], v)
        hist = ck.metadata["history"]
        assert hist[0]["dev_wer"] == hist[1]["dev_wer"]

    def test_keeps_best_epoch(self, task):
        model = RescoreModel(small_config(task, head="unnormalized"), seed=1)
        seen = []
        ck = train_mwer(
            task.splits["train"], task.splits["dev"], model, task.vocab,
            TrainConfig(lr=0.05, epochs=3, patience=5), on_epoch=seen.append,
        )
        assert [h["epoch"] for h in seen] == [0, 1, 2, 3]
        assert ck.metadata["best_dev_wer"] == min(h["dev_wer"] for h in seen)


class TestPretraining:
    def test_perplexity_improves(self, task):
        ck = pretrain_xent(task.text, task.vocab, small_config(task), TrainConfig(lr=0.02, epochs=3))
        hist = ck.metadata["history"]
        assert ck.metadata["best_dev_ppl"] < hist[0]["dev_ppl"]
        assert ck.metadata["kind"] == "xent"

    def test_rejects_audio_or_unnormalized(self, task):
        with pytest.raises(ValueError):
            pretrain_xent(task.text, task.vocab, small_config(task, head="unnormalized"), TrainConfig())
        with pytest.raises(ValueError):
            pretrain_xent(task.text, task.vocab, small_config(task, attention="a3"), TrainConfig())

    def test_transfer_checks(self, task):
        ck = Checkpoint.from_model(RescoreModel(small_config(task), seed=0), task.vocab.hash)
        with pytest.raises(ValueError, match="hash"):
            init_from_pretrained(ck, small_config(task), vocab_hash="other")
        with pytest.raises(nn.DimensionError):
            init_from_pretrained(ck, small_config(task, hidden_dim=9))
        audio_ck = Checkpoint.from_model(RescoreModel(small_config(task, attention="a3"), seed=0), "h")
        with pytest.raises(ValueError):
            init_from_pretrained(audio_ck, small_config(task))
        m = init_from_pretrained(ck, small_config(task, head="unnormalized", attention="a1"), task.vocab.hash)
        np.testing.assert_array_equal(m.params["lstm1.W_ih"].value[:6], ck.params["lstm1.W_ih"])
        np.testing.assert_array_equal(m.params["embed"].value, ck.params["embed"])
