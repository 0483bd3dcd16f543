"""N-best rescoring and corpus-level WER metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .lm import RescoreModel, Vocabulary, batch_scores, encode_tokens
from .mwer import MAX_NBEST_EVAL, align_counts, combine_scores, edit_distance
from .simulator import Utterance

ALPHA_GRID = (0.25, 0.5, 1.0, 2.0)


@dataclass
class RescoreResult:
    chosen: int
    scores: np.ndarray
    baseline: int = 0


@dataclass
class EvalReport:
    wer: float
    baseline_wer: float
    werr: float
    oracle_wer: float
    utts: int
    sub: int
    ins: int
    dele: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["del"] = d.pop("dele")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def summary(self) -> str:
        return (
            f"WER {self.wer:.2f}%  baseline {self.baseline_wer:.2f}%  WERR {self.werr:.2f}%  "
            f"oracle {self.oracle_wer:.2f}%  ({self.utts} utts; S={self.sub} I={self.ins} D={self.dele})"
        )


def _argmax_first(g: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return int(np.argmax(g))


def truncate(utt: Utterance, max_nbest: int) -> list[int]:
    return list(range(min(len(utt.nbest), max_nbest)))


def lm_scores(
    utts: Sequence[Utterance], model: RescoreModel, vocab: Vocabulary, max_nbest: int = MAX_NBEST_EVAL
) -> list[np.ndarray]:
    """LM score of every (truncated) hypothesis, batched across utterances."""
    seqs, owner = [], []
    for u_idx, u in enumerate(utts):
        for k in truncate(u, max_nbest):
            seqs.append(encode_tokens(u.nbest.hyps[k].words, vocab))
            owner.append(u_idx)
    frames = [u.frames for u in utts] if model.config.uses_audio else None
    flat = batch_scores(model, seqs, frames, owner if frames is not None else None)
    out, pos = [], 0
    for u in utts:
        n = min(len(u.nbest), max_nbest)
        out.append(flat[pos : pos + n])
        pos += n
    return out


def choose(am: np.ndarray, lm: np.ndarray | None, alpha: float) -> RescoreResult:
    g = am.copy() if lm is None or alpha == 0 else combine_scores(lm, am, alpha)
    return RescoreResult(_argmax_first(g), g)


def rescore(
    utt: Utterance,
    model: RescoreModel | None,
    alpha: float,
    vocab: Vocabulary | None = None,
    max_nbest: int = MAX_NBEST_EVAL,
) -> RescoreResult:
    """Pick argmax of ``alpha * lm + am`` over one n-best list."""
    n = min(len(utt.nbest), max_nbest)
    am = utt.am_scores[:n]
    if model is None or alpha == 0:
        return choose(am, None, 0.0)
    if vocab is None:
        raise ValueError("a vocabulary is needed to score hypotheses")
    return choose(am, lm_scores([utt], model, vocab, max_nbest)[0], alpha)


def corpus_counts(hyps: Sequence[str], refs: Sequence[str]) -> tuple[int, int, int, int, int]:
    """(errors, substitutions, insertions, deletions, reference words)."""
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference counts differ")
    errors = sub = ins = dele = nref = 0
    for h, r in zip(hyps, refs):
        hw, rw = h.split(), r.split()
        s, i, d = align_counts(hw, rw)
        sub, ins, dele = sub + s, ins + i, dele + d
        errors += s + i + d
        nref += len(rw)
    return errors, sub, ins, dele, nref


def corpus_wer(hyps: Sequence[str], refs: Sequence[str]) -> float:
    """100 * total word errors / total reference words."""
    if not refs:
        raise ValueError("no utterances to score")
    errors, *_, nref = corpus_counts(hyps, refs)
    if nref == 0:
        raise ValueError("references contain no words")
    return 100.0 * errors / nref


def werr(baseline_wer: float, system_wer: float) -> float:
    if baseline_wer <= 0:
        raise ValueError("WERR is undefined for a zero baseline WER")
    return 100.0 * (baseline_wer - system_wer) / baseline_wer


def oracle_choice(utt: Utterance, max_nbest: int = MAX_NBEST_EVAL) -> int:
    ref = utt.ref.split()
    errs = [edit_distance(utt.nbest.hyps[k].words.split(), ref) for k in truncate(utt, max_nbest)]
    return int(np.argmin(errs))


def oracle_wer(utts: Sequence[Utterance], max_nbest: int = MAX_NBEST_EVAL) -> float:
    if not utts:
        raise ValueError("no utterances to score")
    hyps = [u.nbest.hyps[oracle_choice(u, max_nbest)].words for u in utts]
    return corpus_wer(hyps, [u.ref for u in utts])


def baseline_wer(utts: Sequence[Utterance]) -> float:
    return corpus_wer([u.nbest.hyps[0].words for u in utts], [u.ref for u in utts])


def report_from_choices(utts: Sequence[Utterance], chosen: Sequence[int], max_nbest: int = MAX_NBEST_EVAL) -> EvalReport:
    refs = [u.ref for u in utts]
    hyps = [u.nbest.hyps[k].words for u, k in zip(utts, chosen)]
    errors, sub, ins, dele, nref = corpus_counts(hyps, refs)
    if nref == 0:
        raise ValueError("references contain no words")
    wer = 100.0 * errors / nref
    base = baseline_wer(utts)
    return EvalReport(
        wer=wer,
        baseline_wer=base,
        werr=werr(base, wer) if base > 0 else 0.0,
        oracle_wer=oracle_wer(utts, max_nbest),
        utts=len(utts),
        sub=sub,
        ins=ins,
        dele=dele,
    )


def rescore_dataset(
    utts: Sequence[Utterance],
    model: RescoreModel | None,
    vocab: Vocabulary | None,
    alpha: float,
    max_nbest: int = MAX_NBEST_EVAL,
    scores: list[np.ndarray] | None = None,
) -> list[RescoreResult]:
    if model is not None and alpha != 0 and scores is None:
        scores = lm_scores(utts, model, vocab, max_nbest)
    out = []
    for k, u in enumerate(utts):
        am = u.am_scores[: min(len(u.nbest), max_nbest)]
        out.append(choose(am, None if scores is None else scores[k], alpha))
    return out


def evaluate(
    utts: Sequence[Utterance],
    model: RescoreModel | None,
    vocab: Vocabulary | None,
    alpha: float,
    max_nbest: int = MAX_NBEST_EVAL,
    scores: list[np.ndarray] | None = None,
) -> EvalReport:
    """Rescore every utterance and aggregate into an :class:`EvalReport`."""
    if not utts:
        raise ValueError("no utterances to score")
    results = rescore_dataset(utts, model, vocab, alpha, max_nbest, scores)
    return report_from_choices(utts, [r.chosen for r in results], max_nbest)


def tune_alpha(
    utts: Sequence[Utterance],
    model: RescoreModel,
    vocab: Vocabulary,
    grid: Sequence[float] = ALPHA_GRID,
    max_nbest: int = MAX_NBEST_EVAL,
) -> tuple[float, float]:
    """Grid value with the lowest WER on ``utts`` (first wins ties) and that WER."""
    scores = lm_scores(utts, model, vocab, max_nbest)
    best = None
    for a in grid:
        w = evaluate(utts, model, vocab, a, max_nbest, scores).wer
        if best is None or w < best[1]:
            best = (a, w)
    return best
