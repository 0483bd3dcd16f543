"""Cross-entropy pretraining, MWER fine-tuning and checkpoint files."""

from __future__ import annotations

import json
import logging
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import attention as att
from . import nn_core as nn
from .lm import (
    LmConfig,
    RescoreModel,
    TokenBatch,
    Vocabulary,
    encode_audio,
    encode_tokens,
    forward_logits,
    init_param,
    param_shapes,
    perplexity,
    sequence_scores,
    token_nll,
)
from .mwer import MAX_NBEST_EVAL, MAX_NBEST_TRAIN, NBestLayout, edit_distance, expected_error_loss
from .rescore_eval import evaluate
from .simulator import Utterance

log = logging.getLogger(__name__)

MAGIC = b"RSCR"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated or checksum-failing checkpoint file."""


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 32
    epochs: int = 10
    lam: float = 0.1
    alpha: float = 1.0
    max_nbest: int = MAX_NBEST_TRAIN
    eval_nbest: int = MAX_NBEST_EVAL
    clip: float = 5.0
    seed: int = 0
    patience: int = 3

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not 1 <= self.max_nbest <= MAX_NBEST_TRAIN:
            raise ValueError(f"max_nbest must be in 1..{MAX_NBEST_TRAIN}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs nonnegative")
        if self.lam < 0 or self.alpha < 0:
            raise ValueError("lambda and alpha must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Checkpoint:
    config: LmConfig
    vocab_hash: str
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: RescoreModel, vocab_hash: str, metadata: dict | None = None) -> "Checkpoint":
        return cls(model.config, vocab_hash, model.state(), dict(metadata or {}))

    def model(self) -> RescoreModel:
        return RescoreModel(self.config, {k: nn.parameter(v.copy(), k) for k, v in self.params.items()})


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, params: dict[str, nn.Tensor], lr: float):
        self.params, self.lr = params, lr

    def step(self) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.value -= self.lr * p.grad


class Adam:
    def __init__(self, params: dict[str, nn.Tensor], lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params, self.lr, self.b1, self.b2, self.eps = params, lr, b1, b2, eps
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * p.grad
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * p.grad**2
            p.value -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def make_optimizer(params, config: TrainConfig):
    return Adam(params, config.lr) if config.optimizer == "adam" else SGD(params, config.lr)


def clip_gradients(params: dict[str, nn.Tensor], max_norm: float) -> float:
    """Scale gradients in place to global norm ``max_norm``; returns the pre-clip norm."""
    sq = [float(np.sum(p.grad**2)) for p in params.values() if p.grad is not None]
    norm = float(np.sqrt(np.sum(sq))) if sq else 0.0
    if max_norm > 0 and norm > max_norm:
        k = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= k
    return norm


# ---------------------------------------------------------------------------
# checkpoint files


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``RSCR | u32 version | u64 header len | JSON header | f64 LE data | u32 CRC32``."""
    names = sorted(ckpt.params)
    index, blobs, offset = [], [], 0
    for name in names:
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {
            "config": ckpt.config.to_dict(),
            "vocab_hash": ckpt.vocab_hash,
            "tensors": index,
            "metadata": _jsonable(ckpt.metadata),
        },
        sort_keys=True,
    ).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a rescorer checkpoint")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt file)")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header") from e
    data = raw[16 + hlen : -4]
    params = {}
    for t in header["tensors"]:
        end = t["offset"] + t["nbytes"]
        if end > len(data):
            raise CheckpointError(f"{path}: tensor {t['name']} runs past end of data")
        params[t["name"]] = np.frombuffer(data[t["offset"] : end], dtype="<f8").reshape(t["shape"]).astype(np.float64)
    return Checkpoint(LmConfig.from_dict(header["config"]), header["vocab_hash"], params, header.get("metadata", {}))


# ---------------------------------------------------------------------------
# cross-entropy pretraining


def _epoch_order(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[k : k + batch_size] for k in range(0, n, batch_size)]


def pretrain_xent(
    texts: Sequence[str],
    vocab: Vocabulary,
    lm_config: LmConfig,
    config: TrainConfig,
    dev_texts: Sequence[str] | None = None,
    model: RescoreModel | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Minimise per-token cross-entropy on text; keep the best dev-perplexity epoch."""
    if not texts:
        raise ValueError("empty training corpus")
    if lm_config.head != "normalized" or lm_config.uses_audio:
        raise ValueError("cross-entropy pretraining needs a normalized text-only model")
    model = model or RescoreModel(lm_config, seed=config.seed)
    seqs = [encode_tokens(t, vocab) for t in texts]
    dev = [encode_tokens(t, vocab) for t in (dev_texts or texts)]
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(model.params, config)
    history = [{"epoch": 0, "train_loss": None, "dev_ppl": perplexity(dev, model)}]
    best_state, best_ppl, since_best = model.state(), history[0]["dev_ppl"], 0
    if on_epoch:
        on_epoch(history[-1])
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for idx in _epoch_order(rng, len(seqs), config.batch_size):
            batch = TokenBatch.from_sequences([seqs[k] for k in idx])
            model.zero_grad()
            with nn.Tape() as tape:
                nll, n_tok = token_nll(forward_logits(model, batch), batch)
                loss = nn.scale(nll, 1.0 / n_tok)
            nn.backward(tape, loss)
            clip_gradients(model.params, config.clip)
            opt.step()
            total += float(nll.value)
            count += n_tok
        dev_ppl = perplexity(dev, model)
        history.append({"epoch": epoch, "train_loss": total / count, "dev_ppl": dev_ppl})
        if on_epoch:
            on_epoch(history[-1])
        if dev_ppl < best_ppl:
            best_state, best_ppl, since_best = model.state(), dev_ppl, 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    model.load_state(best_state)
    meta = {"kind": "xent", "history": history, "best_dev_ppl": best_ppl, "train": asdict(config)}
    return Checkpoint.from_model(model, vocab.hash, meta)


def init_from_pretrained(
    ckpt: Checkpoint,
    target: LmConfig,
    vocab_hash: str | None = None,
    seed: int = 0,
    zero_context: bool = False,
) -> RescoreModel:
    """Copy embedding, both LSTM layers and the output affine into ``target``.

    Audio parameters are freshly initialised.  Input-weight rows that read an
    audio context (A1/A2 LSTM inputs, A3 output affine) are fresh too, or
    zeroed when ``zero_context`` so that initial scores equal the checkpoint's.
    """
    src = ckpt.config
    if vocab_hash is not None and vocab_hash != ckpt.vocab_hash:
        raise ValueError("vocabulary hash mismatch between checkpoint and data")
    for name in ("vocab_size", "embed_dim", "hidden_dim"):
        if getattr(src, name) != getattr(target, name):
            raise nn.DimensionError(
                f"cannot transfer weights: {name} {getattr(src, name)} != {getattr(target, name)}"
            )
    if src.uses_audio:
        raise ValueError("pretrained checkpoint must be a text-only model")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(target).items():
        fresh = init_param(name, shape, rng)
        if name in ckpt.params:
            old = ckpt.params[name]
            value = fresh.copy()
            rows = old.shape[0]
            # context slice is appended after the transferable rows
            value[:rows] = old
            if zero_context and rows < shape[0]:
                value[rows:] = 0.0
        else:
            value = fresh
        params[name] = nn.parameter(value, name)
    return RescoreModel(target, params)


# ---------------------------------------------------------------------------
# MWER fine-tuning


@dataclass
class MwerBatch:
    tokens: TokenBatch
    audio: att.AudioBatch | None
    utt_index: np.ndarray
    layout: NBestLayout
    n_hyps: int


def prepare_mwer_batch(
    utts: Sequence[Utterance], vocab: Vocabulary, max_nbest: int, with_audio: bool, with_refs: bool
) -> MwerBatch:
    """Flatten the n-best lists (deduplicated, truncated) and the references."""
    seqs, owner, offsets, am_lists, err_lists = [], [], [], [], []
    for u_idx, u in enumerate(utts):
        seen, hyps = set(), []
        for h in u.nbest.hyps:
            if h.words not in seen:
                seen.add(h.words)
                hyps.append(h)
        if len(hyps) > max_nbest:
            warnings.warn(f"{u.id}: n-best of {len(hyps)} truncated to {max_nbest}", stacklevel=2)
            hyps = sorted(hyps, key=lambda h: -h.am)[:max_nbest]
        ref = u.ref.split()
        offsets.append(len(seqs))
        am_lists.append([h.am for h in hyps])
        err_lists.append([edit_distance(h.words.split(), ref) for h in hyps])
        for h in hyps:
            seqs.append(encode_tokens(h.words, vocab))
            owner.append(u_idx)
    n_hyps = len(seqs)
    if with_refs:
        for u_idx, u in enumerate(utts):
            seqs.append(encode_tokens(u.ref, vocab))
            owner.append(u_idx)
    audio = att.AudioBatch.from_list([u.frames for u in utts]) if with_audio else None
    return MwerBatch(
        TokenBatch.from_sequences(seqs),
        audio,
        np.array(owner),
        NBestLayout.build(offsets, am_lists, err_lists),
        n_hyps,
    )


def mwer_step_loss(model: RescoreModel, batch: MwerBatch, alpha: float, lam: float) -> tuple[nn.Tensor, nn.Tensor]:
    """Build ``L_werr + lam * L_CE`` for one batch; returns (total, werr part)."""
    enc = encode_audio(model, batch.audio, batch.utt_index) if batch.audio is not None else None
    logits = forward_logits(model, batch.tokens, enc)
    scores = sequence_scores(model, logits, batch.tokens)
    werr = expected_error_loss(scores, batch.layout, alpha)
    if lam == 0 or batch.n_hyps == batch.tokens.ids.shape[0]:
        return werr, werr
    ref_rows = np.arange(batch.n_hyps, batch.tokens.ids.shape[0])
    ref_tokens = TokenBatch(batch.tokens.ids[ref_rows], batch.tokens.lengths[ref_rows])
    nll, n_tok = token_nll(nn.index(logits, ref_rows), ref_tokens)
    return nn.add(werr, nn.scale(nll, lam / n_tok)), werr


def train_mwer(
    train: Sequence[Utterance],
    dev: Sequence[Utterance],
    model: RescoreModel,
    vocab: Vocabulary,
    config: TrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Fine-tune ``model`` on n-best lists; keep the best dev-WER epoch (epoch 0 included)."""
    if not train:
        raise ValueError("empty training set")
    if not dev:
        raise ValueError("empty dev set")
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(model.params, config)
    with_audio = model.config.uses_audio

    def dev_wer() -> float:
        return evaluate(dev, model, vocab, config.alpha, config.eval_nbest).wer

    history = [{"epoch": 0, "train_loss": None, "dev_wer": dev_wer()}]
    best_state, best_wer, since_best = model.state(), history[0]["dev_wer"], 0
    if on_epoch:
        on_epoch(history[-1])
    for epoch in range(1, config.epochs + 1):
        total, n_batches = 0.0, 0
        for idx in _epoch_order(rng, len(train), config.batch_size):
            batch = prepare_mwer_batch([train[k] for k in idx], vocab, config.max_nbest, with_audio, config.lam > 0)
            model.zero_grad()
            with nn.Tape() as tape:
                loss, _ = mwer_step_loss(model, batch, config.alpha, config.lam)
            nn.backward(tape, loss)
            clip_gradients(model.params, config.clip)
            opt.step()
            total += float(loss.value)
            n_batches += 1
        wer = dev_wer()
        history.append({"epoch": epoch, "train_loss": total / n_batches, "dev_wer": wer})
        log.info("epoch %d loss %.4f dev WER %.2f", epoch, total / n_batches, wer)
        if on_epoch:
            on_epoch(history[-1])
        if wer < best_wer:
            best_state, best_wer, since_best = model.state(), wer, 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    model.load_state(best_state)
    meta = {"kind": "mwer", "history": history, "best_dev_wer": best_wer, "train": asdict(config)}
    return Checkpoint.from_model(model, vocab.hash, meta)
