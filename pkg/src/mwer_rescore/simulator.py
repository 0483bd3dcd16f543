"""Synthetic first-pass recognizer for a toy voice-assistant domain.

Reference commands come from a slot grammar.  Every vocabulary word owns a
unit-norm prototype vector; an utterance's "acoustic embeddings" are 2-4
noisy copies of each word's prototype.  The first pass decodes each known
word segment against its nearest prototypes and emits an n-best list scored
by a Gaussian log-likelihood plus per-hypothesis score jitter, which models
an imperfect acoustic model that the frames themselves can correct.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import re
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .lm import Vocabulary, check_length, encode_tokens
from .mwer import edit_distance

_SLOT = re.compile(r"\{(\w+)\}")


@dataclass
class GrammarSpec:
    templates: list[str]
    slots: dict[str, list[str]]
    weights: list[float] | None = None
    # Zipf exponent for within-slot sampling; gives the text LM a real prior
    slot_skew: float = 1.0

    def __post_init__(self):
        if not self.templates:
            raise ValueError("grammar has no templates")
        if self.weights is not None and len(self.weights) != len(self.templates):
            raise ValueError("grammar weights must match templates one to one")
        for tpl in self.templates:
            for name in _SLOT.findall(tpl):
                if not self.slots.get(name):
                    raise ValueError(f"template {tpl!r} uses undefined or empty slot {name!r}")
                for w in self.slots[name]:
                    if not w or any(ch.isspace() for ch in w) or _SLOT.search(w):
                        raise ValueError(f"slot {name!r} has invalid word {w!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "GrammarSpec":
        return cls(
            templates=list(d["templates"]),
            slots={k: list(v) for k, v in d["slots"].items()},
            weights=d.get("weights"),
            slot_skew=float(d.get("slot_skew", 1.0)),
        )

    @classmethod
    def load(cls, path) -> "GrammarSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (KeyError, TypeError, json.JSONDecodeError) as e:
            raise ValueError(f"cannot parse grammar {path}: {e}") from e

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def word_classes(self) -> dict[str, str]:
        """Each word's class: its slot name, or ``"literal"`` for template words."""
        classes: dict[str, str] = {}
        for name, words in self.slots.items():
            for w in words:
                classes.setdefault(w, name)
        for tpl in self.templates:
            for tok in tpl.split():
                if not _SLOT.fullmatch(tok):
                    classes.setdefault(tok, "literal")
        return classes

    def words(self) -> list[str]:
        return list(self.word_classes())

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(sorted(self.words()))

    def parses(self, text: str) -> bool:
        toks = text.split()
        for tpl in self.templates:
            parts = tpl.split()
            if len(parts) != len(toks):
                continue
            ok = True
            for p, t in zip(parts, toks):
                m = _SLOT.fullmatch(p)
                if (m and t not in self.slots[m.group(1)]) or (not m and p != t):
                    ok = False
                    break
            if ok:
                return True
        return False


DEFAULT_GRAMMAR = GrammarSpec(
    templates=[
        "play {song}",
        "play {song} by {artist}",
        "play some {genre} music",
        "play some {genre} music in the {room}",
        "set a timer for {number} {unit}",
        "set an alarm for {number} {ampm}",
        "what is the weather in {city}",
        "what is the weather in {city} {day}",
        "call {contact}",
        "call {contact} on {device}",
        "turn {onoff} the {appliance}",
        "turn {onoff} the {appliance} in the {room}",
        "add {item} to my shopping list",
        "remind me to {task} at {number} {ampm}",
        "remind me to {task} {day}",
        "how long is the drive to {city}",
    ],
    slots={
        "song": ["yesterday", "imagine", "thriller", "hallelujah", "believer", "roar", "hello", "closer"],
        "artist": ["adele", "queen", "abba", "beyonce", "coldplay", "madonna", "prince", "drake"],
        "genre": ["jazz", "rock", "blues", "pop", "classical", "reggae", "country", "disco"],
        "number": ["one", "two", "three", "four", "five", "six", "seven", "eight", "ten", "twenty"],
        "unit": ["seconds", "minutes", "hours"],
        "ampm": ["am", "pm"],
        "city": ["boston", "seattle", "austin", "denver", "paris", "london", "tokyo", "berlin"],
        "day": ["today", "tomorrow", "tonight", "monday", "friday", "sunday"],
        "contact": ["mom", "dad", "alice", "bob", "carol", "dave", "grandma", "work"],
        "device": ["mobile", "landline", "speaker"],
        "onoff": ["on", "off"],
        "appliance": ["lights", "fan", "heater", "television", "radio", "oven"],
        "room": ["kitchen", "bedroom", "garage", "office", "hallway"],
        "item": ["milk", "eggs", "bread", "butter", "apples", "coffee", "cheese", "rice"],
        "task": ["exercise", "stretch", "meditate", "study", "vacuum", "shop", "cook", "read"],
    },
    weights=[3, 3, 2, 1, 3, 2, 3, 2, 3, 1, 3, 2, 3, 2, 2, 1],
)


def _zipf(n: int, skew: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** skew
    return w / w.sum()


def gen_corpus(grammar: GrammarSpec, count: int, seed: int) -> list[str]:
    """``count`` reference commands sampled from ``grammar`` (2-12 words each)."""
    if count < 1:
        raise ValueError("count must be at least 1")
    if not any(2 <= len(t.split()) <= 12 for t in grammar.templates):
        raise ValueError("grammar produces no utterance of 2-12 words")
    rng = np.random.default_rng(seed)
    tw = np.ones(len(grammar.templates)) if grammar.weights is None else np.asarray(grammar.weights, float)
    tw = tw / tw.sum()
    out = []
    while len(out) < count:
        tpl = grammar.templates[rng.choice(len(tw), p=tw)]
        words = []
        for tok in tpl.split():
            m = _SLOT.fullmatch(tok)
            if m:
                choices = grammar.slots[m.group(1)]
                words.append(choices[rng.choice(len(choices), p=_zipf(len(choices), grammar.slot_skew))])
            else:
                words.append(tok)
        if 2 <= len(words) <= 12:
            out.append(" ".join(words))
    return out


@dataclass
class PrototypeTable:
    words: list[str]
    vectors: np.ndarray  # [|words|, D], unit rows
    frames_per_word: tuple[int, int] = (2, 4)

    def __post_init__(self):
        self._index = {w: k for k, w in enumerate(self.words)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def vector(self, word: str) -> np.ndarray:
        try:
            return self.vectors[self._index[word]]
        except KeyError:
            raise KeyError(f"word {word!r} has no prototype") from None


def build_prototypes(
    grammar: GrammarSpec, dim: int = 32, seed: int = 0, class_weight: float = 0.8
) -> PrototypeTable:
    """Unit prototypes; words of one slot share a common direction.

    ``class_weight`` is the squared cosine a slot word keeps with its slot
    centre, so within-slot words are the likeliest acoustic confusions.
    Template words get independent random directions.
    """
    rng = np.random.default_rng(seed)
    classes = grammar.word_classes()
    words = sorted(classes)
    centres = {}
    for c in sorted(set(classes.values())):
        v = rng.standard_normal(dim)
        centres[c] = v / np.linalg.norm(v)
    vecs = np.empty((len(words), dim))
    for k, w in enumerate(words):
        r = rng.standard_normal(dim)
        r /= np.linalg.norm(r)
        cw = 0.0 if classes[w] == "literal" else class_weight
        v = np.sqrt(cw) * centres[classes[w]] + np.sqrt(1.0 - cw) * r
        vecs[k] = v / np.linalg.norm(v)
    return PrototypeTable(words, vecs)


def synth_audio(text: str, protos: PrototypeTable, sigma: float, seed, return_counts: bool = False):
    """Frames ``[T, D]``: each word repeated 2-4 times as prototype + N(0, sigma^2)."""
    rng = np.random.default_rng(seed)
    lo, hi = protos.frames_per_word
    chunks, counts = [], []
    for w in text.split():
        mu = protos.vector(w)
        k = int(rng.integers(lo, hi + 1))
        chunks.append(mu + sigma * rng.standard_normal((k, protos.dim)) if sigma > 0 else np.tile(mu, (k, 1)))
        counts.append(k)
    frames = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, protos.dim))
    return (frames, counts) if return_counts else frames


@dataclass
class Hypothesis:
    words: str
    am: float


@dataclass
class NBestList:
    utt_id: str
    ref: str
    hyps: list[Hypothesis]

    def __len__(self) -> int:
        return len(self.hyps)


@dataclass
class Utterance:
    id: str
    ref: str
    frames: np.ndarray
    nbest: NBestList

    @property
    def hyp_words(self) -> list[str]:
        return [h.words for h in self.nbest.hyps]

    @property
    def am_scores(self) -> np.ndarray:
        return np.array([h.am for h in self.nbest.hyps])

    def errors(self) -> np.ndarray:
        ref = self.ref.split()
        return np.array([edit_distance(h.words.split(), ref) for h in self.nbest.hyps])


def _k_best_sums(scores: list[np.ndarray], n: int) -> list[tuple[float, tuple[int, ...]]]:
    """Top-n index tuples by summed score; each ``scores[p]`` sorted descending."""
    start = tuple(0 for _ in scores)
    heap = [(-float(np.sum([s[0] for s in scores])), start)]
    seen = {start}
    out = []
    while heap and len(out) < n:
        neg, idx = heapq.heappop(heap)
        out.append((-neg, idx))
        for p in range(len(idx)):
            if idx[p] + 1 < len(scores[p]):
                nxt = idx[:p] + (idx[p] + 1,) + idx[p + 1 :]
                if nxt not in seen:
                    seen.add(nxt)
                    total = -neg - scores[p][idx[p]] + scores[p][idx[p] + 1]
                    heapq.heappush(heap, (-total, nxt))
    return out


def first_pass_decode(
    frames: np.ndarray,
    protos: PrototypeTable,
    reference: str,
    n: int,
    sigma_conf: float,
    seed,
    boundaries: Sequence[int],
    jitter: float = 0.0,
    candidates: int = 4,
    utt_id: str = "",
) -> NBestList:
    """Word-segmented n-best decoding against the nearest prototypes.

    ``boundaries`` gives the frame count of each reference word.  The list is
    deduplicated and sorted by acoustic score, best first (stable on ties).
    """
    if n < 1:
        raise ValueError("n-best size must be at least 1")
    if int(np.sum(boundaries)) != len(frames):
        raise ValueError("word boundaries do not cover the frames")
    rng = np.random.default_rng(seed)
    per_pos_words, per_pos_scores = [], []
    start = 0
    for k in boundaries:
        m = frames[start : start + k].mean(axis=0)
        start += k
        d2 = np.sum((protos.vectors - m) ** 2, axis=1)
        order = np.argsort(d2, kind="stable")[:candidates]
        per_pos_words.append([protos.words[j] for j in order])
        per_pos_scores.append(-d2[order] / (2.0 * sigma_conf**2))
    best = _k_best_sums(per_pos_scores, n) if per_pos_scores else [(0.0, ())]
    hyps: dict[str, float] = {}
    for total, idx in best:
        words = " ".join(per_pos_words[p][j] for p, j in enumerate(idx))
        am = total + (jitter * rng.standard_normal() if jitter > 0 else 0.0)
        if words not in hyps:
            hyps[words] = am
    ranked = sorted(hyps.items(), key=lambda kv: -kv[1])
    return NBestList(utt_id, reference, [Hypothesis(w, float(a)) for w, a in ranked])


@dataclass
class SimConfig:
    sigma: float = 0.25
    sigma_conf: float = 0.35
    jitter: float = 3.0
    nbest: int = 10
    dim: int = 32
    candidates: int = 4
    class_weight: float = 0.8

    def to_dict(self) -> dict:
        return asdict(self)


def utterance_seed(global_seed: int, utt_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([global_seed, zlib.crc32(utt_id.encode("utf-8"))])


def make_utterance(uid: str, text: str, protos: PrototypeTable, cfg: SimConfig, global_seed: int) -> Utterance:
    audio_seed, decode_seed = utterance_seed(global_seed, uid).spawn(2)
    frames, counts = synth_audio(text, protos, cfg.sigma, audio_seed, return_counts=True)
    nbest = first_pass_decode(
        frames,
        protos,
        text,
        cfg.nbest,
        cfg.sigma_conf,
        decode_seed,
        counts,
        jitter=cfg.jitter,
        candidates=cfg.candidates,
        utt_id=uid,
    )
    return Utterance(uid, text, frames, nbest)


@dataclass
class SyntheticTask:
    grammar: GrammarSpec
    protos: PrototypeTable
    config: SimConfig
    seed: int
    splits: dict[str, list[Utterance]] = field(default_factory=dict)
    text: list[str] = field(default_factory=list)

    @property
    def vocab(self) -> Vocabulary:
        return self.grammar.vocabulary()

    def metadata(self) -> dict:
        return {
            "seed": self.seed,
            "sigma": self.config.sigma,
            "grammar_hash": self.grammar.hash,
            "D": self.config.dim,
            "sim": self.config.to_dict(),
            "splits": {k: len(v) for k, v in self.splits.items()},
        }


def generate_task(
    grammar: GrammarSpec = DEFAULT_GRAMMAR,
    sizes: dict[str, int] | None = None,
    config: SimConfig | None = None,
    seed: int = 0,
    text_size: int = 0,
) -> SyntheticTask:
    """Prototypes plus train/dev/test (and optional text-only) corpora for one seed."""
    sizes = sizes or {"train": 3000, "dev": 300, "test": 500}
    config = config or SimConfig()
    root = np.random.SeedSequence(seed)
    proto_seq, *split_seqs = root.spawn(2 + len(sizes))
    protos = build_prototypes(grammar, config.dim, proto_seq, config.class_weight)
    task = SyntheticTask(grammar, protos, config, seed)
    for (name, count), seq in zip(sizes.items(), split_seqs[: len(sizes)]):
        texts = gen_corpus(grammar, count, seq)
        task.splits[name] = [make_utterance(f"{name}-{k:05d}", t, protos, config, seed) for k, t in enumerate(texts)]
    if text_size > 0:
        task.text = gen_corpus(grammar, text_size, split_seqs[-1])
    return task


CALIBRATED_WER = (8.0, 25.0)


def split_wers(utts: Sequence[Utterance], nbest: int = 10) -> tuple[float, float]:
    """(first-pass top-1 WER, oracle WER over the first ``nbest``) in percent."""
    errors = oracle = nref = 0
    for u in utts:
        errs = u.errors()
        errors += int(errs[0])
        oracle += int(errs[:nbest].min())
        nref += len(u.ref.split())
    return 100.0 * errors / nref, 100.0 * oracle / nref


def is_calibrated(task: SyntheticTask, wer_range: tuple[float, float] = CALIBRATED_WER) -> bool:
    """Every split has top-1 WER inside ``wer_range`` and oracle WER strictly below it."""
    lo, hi = wer_range
    for utts in task.splits.values():
        top1, orc = split_wers(utts, task.config.nbest)
        if not (lo <= top1 <= hi and orc < top1):
            return False
    return True


def generate_calibrated_task(
    grammar: GrammarSpec = DEFAULT_GRAMMAR,
    sizes: dict[str, int] | None = None,
    config: SimConfig | None = None,
    seed: int = 0,
    text_size: int = 0,
    max_tries: int = 5,
) -> SyntheticTask:
    """:func:`generate_task`, moving to the next seed while a split falls outside the calibrated range."""
    for k in range(max_tries):
        task = generate_task(grammar, sizes, config, seed + k, text_size)
        if is_calibrated(task):
            return task
    top1, orc = split_wers(task.splits.get("test") or next(iter(task.splits.values())), task.config.nbest)
    raise ValueError(
        f"no calibrated dataset in {max_tries} seeds from {seed} (last test top-1 {top1:.1f}%, oracle {orc:.1f}%)"
    )


# ---------------------------------------------------------------------------
# dataset files


def utterance_to_json(u: Utterance) -> dict:
    return {
        "id": u.id,
        "ref": u.ref,
        "frames": u.frames.tolist(),
        "nbest": [{"words": h.words, "am": h.am} for h in u.nbest.hyps],
    }


def utterance_from_json(d: dict, vocab: Vocabulary | None = None) -> Utterance:
    frames = np.asarray(d["frames"], dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError(f"utterance {d.get('id')!r}: frames must be a non-empty matrix")
    hyps = [Hypothesis(h["words"], float(h["am"])) for h in d["nbest"]]
    if not hyps:
        raise ValueError(f"utterance {d['id']!r}: empty n-best list")
    if vocab is not None:
        for text in [d["ref"]] + [h.words for h in hyps]:
            check_length(encode_tokens(text, vocab))
    return Utterance(d["id"], d["ref"], frames, NBestList(d["id"], d["ref"], hyps))


def write_jsonl(path, utts: Sequence[Utterance]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for u in utts:
            f.write(json.dumps(utterance_to_json(u)) + "\n")


def read_jsonl(path, vocab: Vocabulary | None = None) -> list[Utterance]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if line.strip():
                try:
                    out.append(utterance_from_json(json.loads(line), vocab))
                except (KeyError, json.JSONDecodeError) as e:
                    raise ValueError(f"{path}:{lineno}: malformed utterance record ({e})") from e
    return out


def write_task(task: SyntheticTask, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task.vocab.save(out / "vocab.txt")
    for name, utts in task.splits.items():
        write_jsonl(out / f"{name}.jsonl", utts)
    if task.text:
        (out / "text.txt").write_text("\n".join(task.text) + "\n", encoding="utf-8")
    (out / "metadata.json").write_text(json.dumps(task.metadata(), indent=2, sort_keys=True) + "\n")
    return out
