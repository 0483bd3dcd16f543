"""scikit-learn style wrappers around the training and rescoring functions.

``X`` for :class:`NBestRescorer` is a sequence of :class:`Utterance` objects;
``X`` for :class:`XentLanguageModel` is a sequence of whitespace-tokenised
strings.  Both follow the usual ``fit``/``predict``/``score`` protocol and
support ``get_params``/``set_params``/``clone``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .lm import LmConfig, RescoreModel, Vocabulary, encode_tokens, perplexity
from .rescore_eval import ALPHA_GRID, EvalReport, evaluate, rescore_dataset, tune_alpha
from .simulator import Utterance
from .training import Checkpoint, TrainConfig, init_from_pretrained, pretrain_xent, train_mwer


def check_utterances(X, need_audio: bool = False) -> list[Utterance]:
    """Validate a non-empty sequence of utterances with non-empty n-best lists."""
    if isinstance(X, Utterance):
        raise TypeError("expected a sequence of utterances, got a single Utterance")
    X = list(X)
    if not X:
        raise ValueError("no utterances given")
    dim = None
    for u in X:
        if not isinstance(u, Utterance):
            raise TypeError(f"expected Utterance objects, got {type(u).__name__}")
        if not len(u.nbest):
            raise ValueError(f"utterance {u.id!r} has an empty n-best list")
        if need_audio:
            if u.frames.ndim != 2 or u.frames.shape[0] == 0:
                raise ValueError(f"utterance {u.id!r} has no audio frames")
            if dim is not None and u.frames.shape[1] != dim:
                raise ValueError("utterances disagree on audio embedding dimension")
            dim = u.frames.shape[1]
    return X


def check_texts(X) -> list[str]:
    if isinstance(X, str):
        raise TypeError("expected a sequence of sentences, got a single string")
    X = [str(t) for t in X]
    if not X:
        raise ValueError("no sentences given")
    return X


def vocabulary_of(texts: Sequence[str]) -> Vocabulary:
    return Vocabulary(sorted({w for t in texts for w in t.split()}))


class XentLanguageModel(BaseEstimator):
    """Normalized text-only LSTM LM trained with per-token cross-entropy."""

    def __init__(self, embed_dim=32, hidden_dim=48, lr=5e-3, epochs=10, batch_size=32, patience=3, seed=0, vocab=None):
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.patience = patience
        self.seed = seed
        self.vocab = vocab

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size, patience=self.patience, seed=self.seed)

    def fit(self, X, y=None, dev=None):
        X = check_texts(X)
        self.vocab_ = self.vocab or vocabulary_of(X)
        cfg = LmConfig(vocab_size=len(self.vocab_), embed_dim=self.embed_dim, hidden_dim=self.hidden_dim)
        self.checkpoint_ = pretrain_xent(X, self.vocab_, cfg, self._train_config(), check_texts(dev) if dev else None)
        self.model_ = self.checkpoint_.model()
        self.history_ = self.checkpoint_.metadata["history"]
        return self

    def perplexity(self, X) -> float:
        check_is_fitted(self, "model_")
        return perplexity([encode_tokens(t, self.vocab_) for t in check_texts(X)], self.model_)

    def score(self, X, y=None) -> float:
        """Negative mean per-token log-loss, so that larger is better."""
        return -float(np.log(self.perplexity(X)))


class NBestRescorer(BaseEstimator):
    """MWER-trained LSTM rescorer, optionally attending to the first-pass audio.

    ``init`` may be a fitted :class:`XentLanguageModel` or a
    :class:`Checkpoint` to start from.  With ``tune_alpha`` the LM weight
    used at prediction time is picked from ``alpha_grid`` on the dev set
    given to :meth:`fit` (the training set when none is given).
    """

    def __init__(
        self,
        head="unnormalized",
        attention="none",
        encoder="none",
        embed_dim=32,
        hidden_dim=48,
        context_dim=16,
        attention_dim=16,
        lr=5e-3,
        epochs=10,
        batch_size=32,
        lam=0.1,
        alpha=1.0,
        tune_alpha=True,
        alpha_grid=ALPHA_GRID,
        max_nbest=64,
        patience=3,
        seed=0,
        vocab=None,
        init=None,
    ):
        self.head = head
        self.attention = attention
        self.encoder = encoder
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.context_dim = context_dim
        self.attention_dim = attention_dim
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.lam = lam
        self.alpha = alpha
        self.tune_alpha = tune_alpha
        self.alpha_grid = alpha_grid
        self.max_nbest = max_nbest
        self.patience = patience
        self.seed = seed
        self.vocab = vocab
        self.init = init

    def _lm_config(self, vocab: Vocabulary, audio_dim: int) -> LmConfig:
        return LmConfig(
            vocab_size=len(vocab),
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            head=self.head,
            attention=self.attention,
            encoder=self.encoder,
            context_dim=self.context_dim,
            attention_dim=self.attention_dim,
            audio_dim=audio_dim,
        )

    def _start_model(self, cfg: LmConfig) -> RescoreModel:
        init = self.init
        if isinstance(init, XentLanguageModel):
            check_is_fitted(init, "checkpoint_")
            init = init.checkpoint_
        if init is None:
            return RescoreModel(cfg, seed=self.seed)
        if not isinstance(init, Checkpoint):
            raise TypeError("init must be a Checkpoint or a fitted XentLanguageModel")
        return init_from_pretrained(init, cfg, self.vocab_.hash, seed=self.seed)

    def fit(self, X, y=None, dev=None):
        uses_audio = self.attention != "none"
        X = check_utterances(X, uses_audio)
        dev = check_utterances(dev, uses_audio) if dev is not None else X
        if self.vocab is not None:
            self.vocab_ = self.vocab
        elif isinstance(self.init, XentLanguageModel):
            self.vocab_ = self.init.vocab_
        else:
            self.vocab_ = vocabulary_of([u.ref for u in X] + [h.words for u in X for h in u.nbest.hyps])
        cfg = self._lm_config(self.vocab_, X[0].frames.shape[1])
        tc = TrainConfig(
            lr=self.lr,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lam=self.lam,
            alpha=self.alpha,
            max_nbest=self.max_nbest,
            patience=self.patience,
            seed=self.seed,
        )
        self.checkpoint_ = train_mwer(X, dev, self._start_model(cfg), self.vocab_, tc)
        self.model_ = self.checkpoint_.model()
        self.history_ = self.checkpoint_.metadata["history"]
        if self.tune_alpha:
            self.alpha_, _ = tune_alpha(dev, self.model_, self.vocab_, self.alpha_grid)
        else:
            self.alpha_ = self.alpha
        return self

    def predict(self, X) -> list[str]:
        """The chosen hypothesis text for every utterance."""
        check_is_fitted(self, "model_")
        X = check_utterances(X, self.model_.config.uses_audio)
        results = rescore_dataset(X, self.model_, self.vocab_, self.alpha_)
        return [u.nbest.hyps[r.chosen].words for u, r in zip(X, results)]

    def evaluate(self, X) -> EvalReport:
        check_is_fitted(self, "model_")
        X = check_utterances(X, self.model_.config.uses_audio)
        return evaluate(X, self.model_, self.vocab_, self.alpha_)

    def score(self, X, y=None) -> float:
        """Negative corpus WER in percent, so that larger is better."""
        return -self.evaluate(X).wer
