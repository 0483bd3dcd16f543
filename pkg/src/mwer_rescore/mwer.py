"""Word-level edit distance and the n-best expected-error objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn_core as nn

MAX_NBEST_TRAIN = 64
MAX_NBEST_EVAL = 10


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Levenshtein distance with unit substitution, insertion and deletion costs."""
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def align_counts(hyp: Sequence, ref: Sequence) -> tuple[int, int, int]:
    """(substitutions, insertions, deletions) of one minimum-cost alignment.

    Insertions are hypothesis words with no reference counterpart.  The
    backtrace prefers match/substitution, then deletion, then insertion.
    """
    n, m = len(hyp), len(ref)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (hyp[i - 1] != ref[j - 1]))
    sub = ins = dele = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (hyp[i - 1] != ref[j - 1]):
            sub += hyp[i - 1] != ref[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            dele += 1
            j -= 1
        else:
            ins += 1
            i -= 1
    return int(sub), ins, dele


def relative_edit(distances: Sequence[float]) -> tuple[np.ndarray, float]:
    """Mean-centred edit distances and the uniform n-best mean."""
    E = np.asarray(distances, dtype=np.float64)
    if E.size == 0:
        raise ValueError("empty n-best list")
    mean_e = float(E.mean())
    return E - mean_e, mean_e


def combine_scores(lm_scores, am_log_scores, alpha: float) -> np.ndarray:
    lm = np.asarray(lm_scores, dtype=np.float64)
    am = np.asarray(am_log_scores, dtype=np.float64)
    if lm.shape != am.shape:
        raise ValueError(f"lm and am score lists differ in length: {lm.shape} vs {am.shape}")
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    return alpha * lm + am


def nbest_posterior(g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.size == 0:
        raise ValueError("empty n-best list")
    z = np.exp(g - g.max())
    return z / z.sum()


def mwer_loss(p, rel_err) -> float:
    p = np.asarray(p, dtype=np.float64)
    rel_err = np.asarray(rel_err, dtype=np.float64)
    if p.shape != rel_err.shape:
        raise ValueError(f"posterior and relative errors differ in length: {p.shape} vs {rel_err.shape}")
    return float(p @ rel_err)


def total_loss(mwer, xent, lam: float):
    """``mwer + lam * xent``; works on floats and on tensors."""
    if isinstance(mwer, nn.Tensor) or isinstance(xent, nn.Tensor):
        return nn.add(mwer, nn.scale(xent, lam))
    return mwer + lam * xent


@dataclass
class MwerBatchResult:
    errors: np.ndarray
    mean_error: float
    rel_errors: np.ndarray
    scores: np.ndarray
    posterior: np.ndarray
    loss: float


def mwer_result(lm_scores, am_log_scores, errors, alpha: float) -> MwerBatchResult:
    """All intermediate quantities of the objective for one n-best list."""
    rel, mean_e = relative_edit(errors)
    g = combine_scores(lm_scores, am_log_scores, alpha)
    p = nbest_posterior(g)
    return MwerBatchResult(np.asarray(errors), mean_e, rel, g, p, mwer_loss(p, rel))


def posterior_grad(p, rel_err) -> np.ndarray:
    """d loss / d g_i = p_i * (rel_i - sum_j p_j rel_j)."""
    p = np.asarray(p, dtype=np.float64)
    rel_err = np.asarray(rel_err, dtype=np.float64)
    return p * (rel_err - p @ rel_err)


@dataclass
class NBestLayout:
    """Ragged n-best lists laid out as a padded ``[U, Nmax]`` grid.

    ``slot[u, k]`` is the flat index of hypothesis k of utterance u in the
    sequence-score vector; padding slots point at 0 and are masked out.
    """

    slot: np.ndarray
    mask: np.ndarray
    am: np.ndarray
    rel_err: np.ndarray

    @classmethod
    def build(cls, offsets: Sequence[int], am_lists, error_lists) -> "NBestLayout":
        sizes = [len(a) for a in am_lists]
        U, N = len(sizes), max(sizes)
        slot = np.zeros((U, N), dtype=np.int64)
        mask = np.zeros((U, N), dtype=bool)
        am = np.zeros((U, N))
        rel = np.zeros((U, N))
        for u, (off, a, e) in enumerate(zip(offsets, am_lists, error_lists)):
            n = len(a)
            slot[u, :n] = off + np.arange(n)
            mask[u, :n] = True
            am[u, :n] = a
            rel[u, :n] = relative_edit(e)[0]
        return cls(slot, mask, am, rel)


def expected_error_loss(lm_scores: nn.Tensor, layout: NBestLayout, alpha: float) -> nn.Tensor:
    """Mean over utterances of the posterior-weighted relative edit distance.

    Gradient flows only into ``lm_scores``; acoustic scores and edit
    distances are constants.
    """
    lm = nn.index(lm_scores, layout.slot)
    g = nn.add(nn.scale(lm, alpha), layout.am)
    p = nn.softmax(g, axis=-1, mask=layout.mask)
    per_utt = nn.sum(nn.mul(p, layout.rel_err), axis=1)
    return nn.mean(per_utt)
