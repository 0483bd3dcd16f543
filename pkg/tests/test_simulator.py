import json

import numpy as np
import pytest

from mwer_rescore import simulator as sim
from mwer_rescore.lm import Vocabulary


@pytest.fixture(scope="module")
def protos():
    return sim.build_prototypes(sim.DEFAULT_GRAMMAR, dim=16, seed=0, class_weight=0.8)


class TestGrammar:
    def test_corpus_parses_and_is_seeded(self):
        texts = sim.gen_corpus(sim.DEFAULT_GRAMMAR, 200, seed=4)
        assert texts == sim.gen_corpus(sim.DEFAULT_GRAMMAR, 200, seed=4)
        assert texts != sim.gen_corpus(sim.DEFAULT_GRAMMAR, 200, seed=5)
        assert all(sim.DEFAULT_GRAMMAR.parses(t) for t in texts)
        assert all(2 <= len(t.split()) <= 12 for t in texts)

    def test_invalid_grammars(self, tmp_path):
        with pytest.raises(ValueError):
            sim.GrammarSpec(templates=[], slots={})
        with pytest.raises(ValueError):
            sim.GrammarSpec(templates=["play {song}"], slots={})
        with pytest.raises(ValueError):
            sim.GrammarSpec(templates=["a b"], slots={}, weights=[1.0, 2.0])
        bad = tmp_path / "g.json"
        bad.write_text("{not json")
        with pytest.raises(ValueError):
            sim.GrammarSpec.load(bad)

    def test_no_valid_length(self):
        g = sim.GrammarSpec(templates=["hello"], slots={})
        with pytest.raises(ValueError):
            sim.gen_corpus(g, 3, 0)

    def test_round_trip_and_vocabulary(self, tmp_path):
        path = tmp_path / "g.json"
        path.write_text(json.dumps(sim.DEFAULT_GRAMMAR.to_dict()))
        g = sim.GrammarSpec.load(path)
        assert g.hash == sim.DEFAULT_GRAMMAR.hash
        v = g.vocabulary()
        assert isinstance(v, Vocabulary)
        assert set(v.tokens[3:]) == set(g.words())


class TestPrototypes:
    def test_unit_norm_and_class_geometry(self, protos):
        np.testing.assert_allclose(np.linalg.norm(protos.vectors, axis=1), 1.0)
        classes = sim.DEFAULT_GRAMMAR.word_classes()
        slot_words = [w for w in protos.words if classes[w] != "literal"]
        same, other = [], []
        for a in slot_words:
            for b in slot_words:
                if a < b:
                    cos = protos.vector(a) @ protos.vector(b)
                    (same if classes[a] == classes[b] else other).append(cos)
        assert np.mean(same) > np.mean(other) + 0.3

    def test_missing_word(self, protos):
        with pytest.raises(KeyError):
            protos.vector("zebra")


class TestAudio:
    def test_noiseless_frames_equal_prototypes(self, protos):
        frames, counts = sim.synth_audio("play jazz", protos, 0.0, 1, return_counts=True)
        assert all(2 <= c <= 4 for c in counts)
        np.testing.assert_array_equal(frames[: counts[0]], np.tile(protos.vector("play"), (counts[0], 1)))

    def test_noise_scale(self, protos):
        frames, counts = sim.synth_audio(" ".join(["play"] * 300), protos, 0.3, 2, return_counts=True)
        resid = frames - protos.vector("play")
        assert resid.std() == pytest.approx(0.3, rel=0.05)

    def test_same_seed_same_frames(self, protos):
        a = sim.synth_audio("play jazz", protos, 0.3, 7)
        np.testing.assert_array_equal(a, sim.synth_audio("play jazz", protos, 0.3, 7))


class TestFirstPass:
    def test_noiseless_recovers_reference(self, protos):
        text = "play some jazz"
        if not all(w in protos for w in text.split()):
            text = sim.gen_corpus(sim.DEFAULT_GRAMMAR, 1, 0)[0]
        frames, counts = sim.synth_audio(text, protos, 0.0, 0, return_counts=True)
        nb = sim.first_pass_decode(frames, protos, text, 10, 0.35, 0, counts)
        assert nb.hyps[0].words == text
        assert len(nb) == 10

    def test_sorted_unique_and_bounded(self, protos):
        text = sim.gen_corpus(sim.DEFAULT_GRAMMAR, 1, 3)[0]
        frames, counts = sim.synth_audio(text, protos, 0.3, 0, return_counts=True)
        nb = sim.first_pass_decode(frames, protos, text, 10, 0.35, 0, counts, jitter=2.0)
        am = [h.am for h in nb.hyps]
        assert am == sorted(am, reverse=True)
        assert len({h.words for h in nb.hyps}) == len(nb.hyps) <= 10
        assert all(len(h.words.split()) == len(text.split()) for h in nb.hyps)

    def test_k_best_sums_against_brute_force(self):
        import itertools

        rng = np.random.default_rng(0)
        scores = [np.sort(rng.normal(size=4))[::-1] for _ in range(3)]
        brute = sorted((sum(s[i] for s, i in zip(scores, idx)), idx) for idx in itertools.product(range(4), repeat=3))
        brute = [t for t, _ in reversed(brute)][:10]
        got = [t for t, _ in sim._k_best_sums(scores, 10)]
        np.testing.assert_allclose(got, brute, atol=1e-12)

    def test_bad_arguments(self, protos):
        frames, counts = sim.synth_audio("play jazz", protos, 0.0, 0, return_counts=True)
        with pytest.raises(ValueError):
            sim.first_pass_decode(frames, protos, "play jazz", 0, 0.35, 0, counts)
        with pytest.raises(ValueError):
            sim.first_pass_decode(frames, protos, "play jazz", 5, 0.35, 0, [1])


class TestTask:
    def test_noiseless_task_has_zero_wer(self):
        cfg = sim.SimConfig(sigma=0.0, jitter=0.0)
        task = sim.generate_task(sizes={"test": 30}, config=cfg, seed=0)
        assert sim.split_wers(task.splits["test"]) == (0.0, 0.0)

    def test_default_config_is_calibrated(self):
        task = sim.generate_task(sizes={"dev": 300}, seed=0)
        top1, orc = sim.split_wers(task.splits["dev"])
        assert 8.0 <= top1 <= 25.0
        assert orc < top1
        assert sim.is_calibrated(task)

    def test_calibrated_generation_gives_up(self):
        with pytest.raises(ValueError, match="no calibrated dataset"):
            sim.generate_calibrated_task(sizes={"test": 5}, config=sim.SimConfig(sigma=0.0, jitter=0.0), max_tries=2)

    def test_deterministic_per_seed(self):
        a = sim.generate_task(sizes={"dev": 5}, seed=3)
        b = sim.generate_task(sizes={"dev": 5}, seed=3)
        for u, v in zip(a.splits["dev"], b.splits["dev"]):
            assert u.ref == v.ref
            np.testing.assert_array_equal(u.frames, v.frames)
            assert u.hyp_words == v.hyp_words

    def test_write_and_read(self, tmp_path):
        task = sim.generate_task(sizes={"train": 4, "dev": 3}, seed=1, text_size=6)
        out = sim.write_task(task, tmp_path / "data")
        assert {p.name for p in out.iterdir()} == {"vocab.txt", "train.jsonl", "dev.jsonl", "text.txt", "metadata.json"}
        back = sim.read_jsonl(out / "dev.jsonl", Vocabulary.load(out / "vocab.txt"))
        for u, v in zip(task.splits["dev"], back):
            assert u.ref == v.ref and u.hyp_words == v.hyp_words
            np.testing.assert_array_equal(u.frames, v.frames)
            np.testing.assert_array_equal(u.am_scores, v.am_scores)
        meta = json.loads((out / "metadata.json").read_text())
        assert meta["seed"] == 1 and meta["D"] == task.config.dim and meta["grammar_hash"] == task.grammar.hash
        assert len((out / "text.txt").read_text().splitlines()) == 6

    def test_malformed_records(self, tmp_path):
        p = tmp_path / "x.jsonl"
        p.write_text('{"id": "a", "ref": "x"}\n')
        with pytest.raises(ValueError, match="x.jsonl:1"):
            sim.read_jsonl(p)
        p.write_text('{"id": "a", "ref": "x", "frames": [[0.0]], "nbest": []}\n')
        with pytest.raises(ValueError, match="empty n-best"):
            sim.read_jsonl(p)
