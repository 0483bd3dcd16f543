import numpy as np
import pytest

from mwer_rescore import nn_core as nn
from mwer_rescore.attention import AudioBatch
from mwer_rescore.lm import (
    EOS_ID,
    MAX_TOKENS,
    LmConfig,
    RescoreModel,
    SequenceTooLongError,
    TokenBatch,
    UnsupportedHeadError,
    Vocabulary,
    batch_scores,
    decode_tokens,
    encode_audio,
    encode_tokens,
    forward_logits,
    lm_forward,
    perplexity,
    sequence_log_prob,
    sequence_score_unnorm,
    xent_loss,
)


def tiny(head="normalized", **kw):
    return RescoreModel(LmConfig(vocab_size=8, embed_dim=4, hidden_dim=5, head=head, context_dim=3, attention_dim=2, audio_dim=4, **kw), seed=3)


class TestVocabulary:
    def test_specials_and_oov(self, tmp_path):
        v = Vocabulary(["play", "song"])
        assert v.tokens[:3] == ["<s>", "</s>", "<unk>"]
        assert encode_tokens("play jazz", v) == [0, 3, 2, 1]
        assert decode_tokens([0, 3, 4, 1], v) == "play song"
        v.save(tmp_path / "v.txt")
        assert Vocabulary.load(tmp_path / "v.txt") == v

    def test_load_rejects_bad_files(self, tmp_path):
        (tmp_path / "a.txt").write_text("a\nb\nc\n")
        with pytest.raises(ValueError):
            Vocabulary.load(tmp_path / "a.txt")
        (tmp_path / "b.txt").write_text("<s>\n</s>\n<unk>\nx\nx\n")
        with pytest.raises(ValueError):
            Vocabulary.load(tmp_path / "b.txt")

    def test_hash_depends_on_order(self):
        assert Vocabulary(["a", "b"]).hash != Vocabulary(["b", "a"]).hash


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            LmConfig(vocab_size=5, num_layers=3)
        with pytest.raises(ValueError):
            LmConfig(vocab_size=5, head="softmax")
        with pytest.raises(ValueError):
            LmConfig(vocab_size=5, encoder="cnn")
        with pytest.raises(ValueError):
            LmConfig(vocab_size=5, attention="a5")

    def test_defaults_and_round_trip(self):
        c = LmConfig(vocab_size=10)
        assert (c.embed_dim, c.hidden_dim, c.context_dim, c.attention_dim) == (512, 512, 200, 64)
        assert LmConfig.from_dict(c.to_dict()) == c

    def test_param_set_is_validated(self):
        m = tiny()
        params = dict(m.params)
        params.pop("embed")
        with pytest.raises(ValueError, match="embed"):
            RescoreModel(m.config, params)
        params["embed"] = nn.parameter(np.zeros((3, 3)))
        with pytest.raises(nn.DimensionError):
            RescoreModel(m.config, params)


class TestScoring:
    def test_normalized_rows_are_distributions(self):
        s = lm_forward([0, 3, 4, 1], tiny())
        assert s.normalized
        np.testing.assert_allclose(np.exp(s.scores).sum(axis=1), 1.0, atol=1e-12)

    def test_sequence_log_prob_is_sum_of_steps(self):
        m = tiny()
        ids = [0, 3, 4, 5, 1]
        steps = lm_forward(ids, m).scores
        expected = sum(steps[t, ids[t + 1]] for t in range(len(ids) - 1))
        assert sequence_log_prob(ids, m) == pytest.approx(expected, abs=1e-12)
        assert sequence_log_prob(ids, m) < 0

    def test_head_specific_entry_points(self):
        with pytest.raises(UnsupportedHeadError):
            sequence_score_unnorm([0, 3, 1], tiny())
        with pytest.raises(UnsupportedHeadError):
            sequence_log_prob([0, 3, 1], tiny("unnormalized"))
        with pytest.raises(UnsupportedHeadError):
            perplexity([[0, 3, 1]], tiny("unnormalized"))

    def test_unnormalized_score_is_sum_of_raw_outputs(self):
        m = tiny("unnormalized")
        ids = [0, 6, 7, 1]
        raw = lm_forward(ids, m).scores
        assert sequence_score_unnorm(ids, m) == pytest.approx(sum(raw[t, ids[t + 1]] for t in range(3)), abs=1e-12)

    def test_padding_does_not_change_scores(self):
        m = tiny()
        seqs = [[0, 3, 1], [0, 4, 5, 6, 7, 3, 1], [0, 1]]
        batched = batch_scores(m, seqs)
        single = [sequence_log_prob(s, m) for s in seqs]
        np.testing.assert_allclose(batched, single, atol=1e-12)
        np.testing.assert_array_equal(batch_scores(m, seqs, batch_size=2), batched)

    def test_perplexity_of_uniform_model(self):
        m = tiny()
        m.params["out.W"].value[...] = 0.0
        m.params["out.b"].value[...] = 0.0
        assert perplexity([[0, 3, 4, 1], [0, 1]], m) == pytest.approx(8.0)

    def test_too_long_rejected(self):
        with pytest.raises(SequenceTooLongError):
            TokenBatch.from_sequences([[0] + [3] * MAX_TOKENS + [1]])

    def test_batch_pads_with_eos(self):
        b = TokenBatch.from_sequences([[0, 3, 1], [0, 1]])
        assert b.ids[1, 2] == EOS_ID
        np.testing.assert_array_equal(b.target_mask, [[True, True], [True, False]])

    def test_audio_required_iff_attention(self):
        batch = TokenBatch.from_sequences([[0, 3, 1]])
        with pytest.raises(ValueError):
            forward_logits(tiny(attention="a3"), batch)
        m = tiny(attention="a3")
        enc = encode_audio(m, AudioBatch.from_list([np.ones((5, 4))]), np.array([0]))
        with pytest.raises(ValueError):
            forward_logits(tiny(), batch, enc)

    def test_audio_dimension_checked(self):
        m = tiny(attention="a3")
        with pytest.raises(nn.DimensionError):
            encode_audio(m, AudioBatch.from_list([np.ones((5, 6))]), np.array([0]))

    def test_attention_weights_logged_and_normalized(self):
        m = tiny(attention="a1a3", encoder="cnn")
        frames = np.random.default_rng(0).normal(size=(10, 4))
        enc = encode_audio(m, AudioBatch.from_list([frames]), np.array([0]))
        log = []
        forward_logits(m, TokenBatch.from_sequences([[0, 3, 4, 1]]), enc, attention_log=log)
        assert {h for _, h, _ in log} == {"a1", "a3"}
        for _, _, a in log:
            assert a.shape == (1, 4)
            assert abs(a.sum() - 1.0) < 1e-12


@pytest.mark.parametrize("attention", ["none", "a1", "a2", "a3", "a1a3"])
@pytest.mark.parametrize("head", ["normalized", "unnormalized"])
def test_full_model_gradient(attention, head):
    rng = np.random.default_rng(7)
    m = tiny(head, attention=attention)
    for p in m.params.values():
        p.value[...] = rng.normal(scale=0.5, size=p.shape)
    batch = TokenBatch.from_sequences([[0, 3, 4, 1], [0, 5, 1]])
    audio = AudioBatch.from_list([rng.normal(size=(6, 4)), rng.normal(size=(4, 4))]) if attention != "none" else None

    def f():
        enc = encode_audio(m, audio, np.array([0, 1])) if audio is not None else None
        return xent_loss(batch, m, enc)

    assert nn.grad_check(f, list(m.params.values())) < 1e-4


def test_copy_is_independent():
    m = tiny()
    c = m.copy()
    c.params["embed"].value[0, 0] += 1.0
    assert m.params["embed"].value[0, 0] != c.params["embed"].value[0, 0]
    assert c.num_params() == m.num_params()
