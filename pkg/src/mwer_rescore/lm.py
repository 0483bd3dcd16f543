"""Vocabulary and the two-layer LSTM rescoring language model.

The model is a plain dict of named parameter tensors plus an :class:`LmConfig`.
Forward passes run on padded batches of token sequences so that every
hypothesis of every utterance in a minibatch shares one set of matrix ops.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import attention as att
from . import nn_core as nn

BOS, EOS, UNK = "<s>", "</s>", "<unk>"
BOS_ID, EOS_ID, UNK_ID = 0, 1, 2
MAX_TOKENS = 64
HEADS = ("normalized", "unnormalized")

# injection site -> attention head feeding it
_SITE_HEAD = {"lstm1": "a1", "lstm2": "a2", "output": "a3"}
_LSTM_BIASES = {"lstm1.b", "lstm2.b", "enc.l1.b", "enc.l2.b"}


class SequenceTooLongError(ValueError):
    pass


class UnsupportedHeadError(ValueError):
    pass


class Vocabulary:
    """Dense token <-> id map with ``<s>``, ``</s>``, ``<unk>`` at ids 0, 1, 2."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.tokens: list[str] = [BOS, EOS, UNK]
        self._ids = {t: k for k, t in enumerate(self.tokens)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self._ids:
            self._ids[token] = len(self.tokens)
            self.tokens.append(token)
        return self._ids[token]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def decode(self, idx: int) -> str:
        return self.tokens[idx]

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[:3] != [BOS, EOS, UNK]:
            raise ValueError(f"{path}: vocabulary must start with {BOS}, {EOS}, {UNK}")
        if len(set(lines)) != len(lines):
            raise ValueError(f"{path}: duplicate tokens in vocabulary")
        return cls(lines[3:])


def encode_tokens(text: str, vocab: Vocabulary) -> list[int]:
    """``"play song"`` -> ``[<s>, id(play), id(song), </s>]``; OOV -> ``<unk>``."""
    return [BOS_ID] + [vocab.encode(w) for w in text.split()] + [EOS_ID]


def decode_tokens(ids: Sequence[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.decode(i) for i in ids if i not in (BOS_ID, EOS_ID))


def check_length(ids: Sequence[int]) -> None:
    if len(ids) > MAX_TOKENS:
        raise SequenceTooLongError(f"sequence of {len(ids)} tokens exceeds the {MAX_TOKENS}-token limit")


@dataclass
class LmConfig:
    vocab_size: int
    embed_dim: int = 512
    hidden_dim: int = 512
    num_layers: int = 2
    head: str = "normalized"
    attention: str = "none"
    encoder: str = "none"
    context_dim: int = 200
    attention_dim: int = 64
    audio_dim: int = 768

    def __post_init__(self):
        if self.num_layers != 2:
            raise ValueError("the rescoring LM always has exactly 2 LSTM layers")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        att.placement_sites(self.attention)
        if self.encoder not in att.ENCODERS:
            raise ValueError(f"encoder must be one of {att.ENCODERS}, got {self.encoder!r}")
        if self.encoder != "none" and self.attention == "none":
            raise ValueError("an audio encoder needs an attention placement")
        if min(self.vocab_size, self.embed_dim, self.hidden_dim, self.context_dim, self.attention_dim) < 1:
            raise ValueError("all dimensions must be positive")

    @classmethod
    def toy(cls, vocab_size: int, **overrides) -> "LmConfig":
        """Desk-scale dimensions for the synthetic task."""
        base = dict(embed_dim=32, hidden_dim=48, context_dim=16, attention_dim=16, audio_dim=32)
        base.update(overrides)
        return cls(vocab_size=vocab_size, **base)

    @property
    def uses_audio(self) -> bool:
        return self.attention != "none"

    @property
    def heads(self) -> tuple[str, ...]:
        return tuple(_SITE_HEAD[s] for s in att.placement_sites(self.attention))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LmConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def param_shapes(config: LmConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every trainable tensor for ``config``."""
    V, E, H, C, A = (
        config.vocab_size,
        config.embed_dim,
        config.hidden_dim,
        config.context_dim,
        config.attention_dim,
    )
    sites = att.placement_sites(config.attention)
    in1 = E + (C if "lstm1" in sites else 0)
    in2 = H + (C if "lstm2" in sites else 0)
    out_in = H + (C if "output" in sites else 0)
    shapes = {
        "embed": (V, E),
        "lstm1.W_ih": (in1, 4 * H),
        "lstm1.W_hh": (H, 4 * H),
        "lstm1.b": (4 * H,),
        "lstm2.W_ih": (in2, 4 * H),
        "lstm2.W_hh": (H, 4 * H),
        "lstm2.b": (4 * H,),
        "out.W": (out_in, V),
        "out.b": (V,),
    }
    if config.uses_audio:
        shapes["proj.W"] = (config.audio_dim, C)
        shapes["proj.b"] = (C,)
        if config.encoder == "cnn":
            shapes["enc.kernel"] = (3, 3)
            shapes["enc.bias"] = (1,)
        elif config.encoder == "tdnn":
            shapes["enc.W"] = (len(att.TDNN_OFFSETS) * C, C)
            shapes["enc.b"] = (C,)
        elif config.encoder == "pylstm":
            for layer in (1, 2):
                shapes[f"enc.l{layer}.W_ih"] = (2 * C, 4 * C)
                shapes[f"enc.l{layer}.W_hh"] = (C, 4 * C)
                shapes[f"enc.l{layer}.b"] = (4 * C,)
        for head in config.heads:
            shapes[f"att.{head}.Wq"] = (H, A)
            shapes[f"att.{head}.bq"] = (A,)
            shapes[f"att.{head}.Wk"] = (C, A)
    return shapes


def init_param(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if len(shape) == 1:
        value = np.zeros(shape)
        if name in _LSTM_BIASES:
            H = shape[0] // 4
            value[H : 2 * H] = 1.0  # forget gate
        return value
    if name == "enc.kernel":
        return glorot_kernel(rng)
    return nn.glorot_uniform(rng, shape[0], shape[1], shape)


def glorot_kernel(rng: np.random.Generator) -> np.ndarray:
    return nn.glorot_uniform(rng, 9, 1, (3, 3))


class RescoreModel:
    """Embedding, two LSTM layers, output affine, optional audio attention."""

    def __init__(self, config: LmConfig, params: dict[str, nn.Tensor] | None = None, seed: int = 0):
        self.config = config
        shapes = param_shapes(config)
        if params is None:
            rng = np.random.default_rng(seed)
            params = {name: nn.parameter(init_param(name, shape, rng), name) for name, shape in shapes.items()}
        else:
            missing = set(shapes) - set(params)
            extra = set(params) - set(shapes)
            if missing or extra:
                raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
            for name, shape in shapes.items():
                if params[name].shape != shape:
                    raise nn.DimensionError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.params = params

    @property
    def normalized(self) -> bool:
        return self.config.head == "normalized"

    def num_params(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "RescoreModel":
        return RescoreModel(
            replace(self.config),
            {k: nn.parameter(v.value.copy(), k) for k, v in self.params.items()},
        )

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].value[...] = v


# ---------------------------------------------------------------------------
# batching


@dataclass
class TokenBatch:
    """Right-padded id matrix ``[S, L]`` with per-row lengths (boundaries included)."""

    ids: np.ndarray
    lengths: np.ndarray

    @classmethod
    def from_sequences(cls, seqs: Sequence[Sequence[int]]) -> "TokenBatch":
        if not seqs:
            raise ValueError("empty batch")
        for s in seqs:
            if len(s) < 2:
                raise ValueError("token sequences must include both sentence boundaries")
            check_length(s)
        L = max(len(s) for s in seqs)
        ids = np.full((len(seqs), L), EOS_ID, dtype=np.int64)
        for k, s in enumerate(seqs):
            ids[k, : len(s)] = s
        return cls(ids, np.array([len(s) for s in seqs]))

    @property
    def target_mask(self) -> np.ndarray:
        """``[S, L-1]`` true where position t predicts a real token."""
        return np.arange(self.ids.shape[1] - 1)[None, :] < (self.lengths - 1)[:, None]


@dataclass
class EncodedAudio:
    """Encoded frames gathered per sequence, with keys per attention head."""

    values: nn.Tensor  # [S, T', C]
    mask: np.ndarray  # [S, T']
    keys: dict[str, nn.Tensor] = field(default_factory=dict)


def encode_audio(model: RescoreModel, audio: att.AudioBatch, utt_index: np.ndarray) -> EncodedAudio:
    """Project and encode ``audio`` once per utterance, then gather per sequence."""
    cfg, P = model.config, model.params
    if audio.frames.shape[-1] != cfg.audio_dim:
        raise nn.DimensionError(
            f"audio frames have dimension {audio.frames.shape[-1]}, model expects {cfg.audio_dim}"
        )
    proj = att.project_am(nn.Tensor(audio.frames), P["proj.W"], P["proj.b"], audio.lengths)
    enc, lengths = att.encode(cfg.encoder, proj, P, audio.lengths)
    utt_index = np.asarray(utt_index)
    values = nn.index(enc, utt_index)
    mask = (np.arange(enc.shape[1])[None, :] < lengths[:, None])[utt_index]
    keys = {}
    for head in cfg.heads:
        k = att.attention_keys(enc, P[f"att.{head}.Wk"])
        keys[head] = nn.index(k, utt_index)
    return EncodedAudio(values, mask, keys)


def forward_logits(
    model: RescoreModel,
    batch: TokenBatch,
    audio: EncodedAudio | None = None,
    attention_log: list | None = None,
) -> nn.Tensor:
    """Output-unit scores ``[S, L-1, V]``; row t predicts token t+1 from its history.

    Per step the attention context is computed from the previous top-layer
    hidden state; recurrent sites (a1, a2) consume the previous step's context
    and the output site (a3) the current one.
    """
    cfg, P = model.config, model.params
    if cfg.uses_audio and audio is None:
        raise ValueError("this model attends to audio; frames are required")
    if not cfg.uses_audio and audio is not None:
        raise ValueError("this model has no attention; audio must not be given")
    S, L = batch.ids.shape
    H, C = cfg.hidden_dim, cfg.context_dim
    zeros_h = nn.Tensor(np.zeros((S, H)))
    h1 = c1 = h2 = c2 = zeros_h
    recurrent_heads = [h for h in cfg.heads if h in ("a1", "a2")]
    ctx_prev = {h: nn.Tensor(np.zeros((S, C))) for h in recurrent_heads}
    outs = []
    for t in range(L - 1):
        x = nn.index(P["embed"], batch.ids[:, t])
        ctx_now = {}
        for head in cfg.heads:
            if head != "a3" and t == L - 2:
                continue
            c, alpha = att.attend(
                h2, audio.values, P[f"att.{head}.Wq"], P[f"att.{head}.bq"], audio.keys[head], audio.mask
            )
            ctx_now[head] = c
            if attention_log is not None:
                attention_log.append((t, head, alpha.value))
        x = att.inject_context(cfg.attention, "lstm1", x, ctx_prev.get("a1"))
        h1, c1 = nn.lstm_step(x, h1, c1, P["lstm1.W_ih"], P["lstm1.W_hh"], P["lstm1.b"])
        x2 = att.inject_context(cfg.attention, "lstm2", h1, ctx_prev.get("a2"))
        h2, c2 = nn.lstm_step(x2, h2, c2, P["lstm2.W_ih"], P["lstm2.W_hh"], P["lstm2.b"])
        outs.append(att.inject_context(cfg.attention, "output", h2, ctx_now.get("a3")))
        for head in recurrent_heads:
            if head in ctx_now:
                ctx_prev[head] = ctx_now[head]
    top = nn.stack(outs, axis=1)
    return nn.affine(top, P["out.W"], P["out.b"])


def _picked(logits_or_logp: nn.Tensor, batch: TokenBatch) -> nn.Tensor:
    S, T = batch.ids.shape[0], batch.ids.shape[1] - 1
    rows = np.arange(S)[:, None]
    cols = np.arange(T)[None, :]
    picked = nn.index(logits_or_logp, (rows, cols, batch.ids[:, 1:]))
    return nn.mul(picked, batch.target_mask.astype(np.float64))


def sequence_scores(model: RescoreModel, logits: nn.Tensor, batch: TokenBatch) -> nn.Tensor:
    """Per-sequence LM score ``[S]``: log p_lm for the normalized head, raw score sum otherwise."""
    if model.normalized:
        return nn.sum(_picked(nn.log_softmax(logits, axis=-1), batch), axis=1)
    return nn.sum(_picked(logits, batch), axis=1)


def token_nll(logits: nn.Tensor, batch: TokenBatch) -> tuple[nn.Tensor, int]:
    """Summed per-token negative log-likelihood (softmax over raw scores) and token count."""
    total = nn.sum(_picked(nn.log_softmax(logits, axis=-1), batch))
    return nn.neg(total), int(batch.target_mask.sum())


# ---------------------------------------------------------------------------
# single-sequence API


@dataclass
class StepScores:
    scores: np.ndarray  # [L-1, V]
    normalized: bool


def _single(model: RescoreModel, ids: Sequence[int], audio) -> tuple[TokenBatch, EncodedAudio | None]:
    batch = TokenBatch.from_sequences([list(ids)])
    enc = None
    if audio is not None:
        if not model.config.uses_audio:
            raise ValueError("this model has no attention; audio must not be given")
        enc = encode_audio(model, att.AudioBatch.from_list([audio]), np.array([0]))
    return batch, enc


def lm_forward(ids: Sequence[int], model: RescoreModel, audio=None) -> StepScores:
    """Score vectors for positions 1..L-1 (log-probabilities for the normalized head)."""
    batch, enc = _single(model, ids, audio)
    logits = forward_logits(model, batch, enc)
    if model.normalized:
        logits = nn.log_softmax(logits, axis=-1)
    return StepScores(logits.value[0], model.normalized)


def sequence_log_prob(ids: Sequence[int], model: RescoreModel, audio=None) -> float:
    if not model.normalized:
        raise UnsupportedHeadError("sequence_log_prob needs the normalized head")
    batch, enc = _single(model, ids, audio)
    return float(sequence_scores(model, forward_logits(model, batch, enc), batch).value[0])


def sequence_score_unnorm(ids: Sequence[int], model: RescoreModel, audio=None) -> float:
    if model.normalized:
        raise UnsupportedHeadError("sequence_score_unnorm needs the unnormalized head")
    batch, enc = _single(model, ids, audio)
    return float(sequence_scores(model, forward_logits(model, batch, enc), batch).value[0])


def batch_scores(
    model: RescoreModel,
    seqs: Sequence[Sequence[int]],
    frames: Sequence[np.ndarray] | None = None,
    utt_index: Sequence[int] | None = None,
    batch_size: int = 512,
) -> np.ndarray:
    """LM scores for many sequences without recording gradients.

    ``frames`` lists one matrix per utterance and ``utt_index[s]`` names the
    utterance of sequence ``s``.
    """
    out = np.empty(len(seqs))
    for start in range(0, len(seqs), batch_size):
        stop = min(start + batch_size, len(seqs))
        batch = TokenBatch.from_sequences(seqs[start:stop])
        enc = None
        if model.config.uses_audio:
            if frames is None:
                raise ValueError("this model attends to audio; frames are required")
            idx = np.asarray(utt_index[start:stop])
            used, local = np.unique(idx, return_inverse=True)
            audio = att.AudioBatch.from_list([frames[u] for u in used])
            enc = encode_audio(model, audio, local)
        elif frames is not None:
            raise ValueError("this model has no attention; audio must not be given")
        out[start:stop] = sequence_scores(model, forward_logits(model, batch, enc), batch).value
    return out


def perplexity(corpus: Sequence[Sequence[int]], model: RescoreModel, frames=None, utt_index=None) -> float:
    """exp(mean per-token NLL); defined only for the normalized head."""
    if not model.normalized:
        raise UnsupportedHeadError("perplexity is only defined for the normalized head")
    if not corpus:
        raise ValueError("empty corpus")
    total = batch_scores(model, corpus, frames, utt_index).sum()
    count = int(np.sum([len(s) - 1 for s in corpus]))
    return float(np.exp(-total / count))


def xent_loss(
    batch: Sequence[Sequence[int]] | TokenBatch,
    model: RescoreModel,
    audio: EncodedAudio | None = None,
) -> nn.Tensor:
    """Mean per-token cross-entropy (nats) as a differentiable scalar."""
    if not isinstance(batch, TokenBatch):
        if not batch:
            raise ValueError("empty batch")
        batch = TokenBatch.from_sequences(batch)
    nll, count = token_nll(forward_logits(model, batch, audio), batch)
    return nn.scale(nll, 1.0 / count)
