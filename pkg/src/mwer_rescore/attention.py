"""Attention over first-pass acoustic embeddings.

Audio is handled as a padded batch ``[U, T, D]`` plus per-utterance lengths.
The pipeline is: per-frame projection to ``context_dim`` -> optional context
encoder (cnn, tdnn, pylstm) -> key projection -> per-step content attention
queried by the language model's top hidden state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_core as nn

PLACEMENTS = ("none", "a1", "a2", "a3", "a1a3")
ENCODERS = ("none", "cnn", "tdnn", "pylstm")
TDNN_OFFSETS = (-1, 0, 1, 2)

# which injection sites each placement feeds
_SITES = {
    "none": (),
    "a1": ("lstm1",),
    "a2": ("lstm2",),
    "a3": ("output",),
    "a1a3": ("lstm1", "output"),
}


def placement_sites(placement: str) -> tuple[str, ...]:
    try:
        return _SITES[placement]
    except KeyError:
        raise ValueError(f"unknown attention placement {placement!r}; expected one of {PLACEMENTS}") from None


@dataclass
class AudioBatch:
    """Zero-padded frames ``[U, T, D]`` with true lengths ``[U]``."""

    frames: np.ndarray
    lengths: np.ndarray

    @classmethod
    def from_list(cls, frames_list) -> "AudioBatch":
        arrays = [np.asarray(f, dtype=np.float64) for f in frames_list]
        if not arrays:
            raise ValueError("no audio frames given")
        for a in arrays:
            if a.ndim != 2 or a.shape[0] < 1:
                raise ValueError(f"audio frames must be a non-empty T x D matrix, got shape {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError("audio frames contain non-finite values")
        D = arrays[0].shape[1]
        if any(a.shape[1] != D for a in arrays):
            raise ValueError("audio frames disagree on embedding dimension")
        T = max(a.shape[0] for a in arrays)
        out = np.zeros((len(arrays), T, D))
        for k, a in enumerate(arrays):
            out[k, : a.shape[0]] = a
        return cls(out, np.array([a.shape[0] for a in arrays]))

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.frames.shape[1])[None, :] < self.lengths[:, None]


def encoded_length(encoder: str, T):
    """Frame count after ``encoder`` for input length(s) ``T``."""
    T = np.asarray(T)
    if encoder == "none" or encoder == "tdnn":
        return T
    if encoder == "cnn":
        return -(-T // 3)
    if encoder == "pylstm":
        return (T // 2) // 2
    raise ValueError(f"unknown encoder {encoder!r}; expected one of {ENCODERS}")


def _time_mask(lengths: np.ndarray, T: int) -> np.ndarray:
    return (np.arange(T)[None, :] < lengths[:, None])[:, :, None]


def project_am(frames, W, b, lengths=None) -> nn.Tensor:
    """Per-frame affine projection; padded frames stay exactly zero."""
    frames = nn.constant(frames)
    if frames.shape[-1] != W.shape[0]:
        raise nn.DimensionError(f"project_am: frames shape {frames.shape} vs projection {W.shape}")
    y = nn.affine(frames, W, b)
    if lengths is not None and frames.value.ndim == 3:
        mask = _time_mask(np.asarray(lengths), frames.shape[1])
        if not mask.all():
            y = nn.masked_fill(y, ~mask, 0.0)
    return y


def encode_cnn(frames, params: dict, lengths):
    return nn.conv_time(frames, params["enc.kernel"], params["enc.bias"], pool=3, lengths=lengths)


def encode_tdnn(frames, params: dict, lengths):
    """Splice offsets -1..+2 (edges replicated per utterance), then tanh(affine)."""
    frames = nn.constant(frames)
    U, T, _ = frames.shape
    lengths = np.asarray(lengths)
    t = np.arange(T)[None, :, None] + np.array(TDNN_OFFSETS)[None, None, :]
    t = np.clip(t, 0, np.maximum(lengths - 1, 0)[:, None, None])  # [U, T, 4]
    u = np.broadcast_to(np.arange(U)[:, None, None], t.shape)
    spliced = nn.index(frames, (u, t))  # [U, T, 4, C]
    spliced = nn.reshape(spliced, (U, T, -1))
    y = nn.tanh(nn.affine(spliced, params["enc.W"], params["enc.b"]))
    mask = _time_mask(lengths, T)
    if not mask.all():
        y = nn.masked_fill(y, ~mask, 0.0)
    return y, lengths


def encode_pylstm(frames, params: dict, lengths):
    """Two pyramidal LSTM layers, each fed concatenated adjacent frame pairs."""
    x = nn.constant(frames)
    lengths = np.asarray(lengths)
    if np.any(lengths < 4):
        raise ValueError(f"pyramidal LSTM encoder needs at least 4 frames, got {int(lengths.min())}")
    for layer in (1, 2):
        U, T, C = x.shape
        T2 = T // 2
        x = nn.index(x, (slice(None), slice(0, 2 * T2)))
        x = nn.reshape(x, (U, T2, 2 * C))
        lengths = lengths // 2
        W_ih, W_hh, b = (params[f"enc.l{layer}.{k}"] for k in ("W_ih", "W_hh", "b"))
        H = W_hh.shape[0]
        h = nn.Tensor(np.zeros((U, H)))
        c = nn.Tensor(np.zeros((U, H)))
        outs = []
        for t in range(T2):
            h, c = nn.lstm_step(nn.index(x, (slice(None), t)), h, c, W_ih, W_hh, b)
            outs.append(h)
        x = nn.stack(outs, axis=1)
        mask = _time_mask(lengths, T2)
        if not mask.all():
            x = nn.masked_fill(x, ~mask, 0.0)
    return x, lengths


def encode(encoder: str, frames, params: dict, lengths):
    """Dispatch to the configured context encoder; ``none`` is the identity."""
    if encoder == "none":
        return nn.constant(frames), np.asarray(lengths)
    if encoder == "cnn":
        return encode_cnn(frames, params, lengths)
    if encoder == "tdnn":
        return encode_tdnn(frames, params, lengths)
    if encoder == "pylstm":
        return encode_pylstm(frames, params, lengths)
    raise ValueError(f"unknown encoder {encoder!r}; expected one of {ENCODERS}")


def attention_keys(encoded, Wk) -> nn.Tensor:
    # a key bias would shift every score of a step equally; softmax ignores it
    return nn.matmul(encoded, Wk)


def attend(query, encoded, Wq, bq, keys, mask=None):
    """Dot-product attention of ``query`` [S, H] over ``encoded`` [S, T, C].

    ``keys`` [S, T, A] are the projected frames; ``mask`` [S, T] marks real
    frames.  Returns ``(context [S, C], weights [S, T])``.
    """
    encoded = nn.constant(encoded)
    if encoded.shape[-2] == 0:
        raise ValueError("cannot attend over an empty frame sequence")
    S, A = query.shape[0], Wq.shape[1]
    q = nn.affine(query, Wq, bq)
    scores = nn.reshape(nn.matmul(keys, nn.reshape(q, (S, A, 1))), (S, -1))
    alpha = nn.softmax(scores, axis=-1, mask=mask)
    context = nn.reshape(nn.matmul(nn.reshape(alpha, (S, 1, -1)), encoded), (S, -1))
    return context, alpha


def attend_single(query, frames, Wq, bq, Wk):
    """Unbatched attention: ``query`` [H], ``frames`` [T, C] -> (context [C], weights [T])."""
    frames = nn.constant(frames)
    if frames.shape[0] == 0:
        raise ValueError("cannot attend over an empty frame sequence")
    q = nn.reshape(nn.constant(query), (1, -1))
    enc = nn.reshape(frames, (1,) + frames.shape)
    keys = attention_keys(enc, Wk)
    c, a = attend(q, enc, Wq, bq, keys)
    return nn.reshape(c, (-1,)), nn.reshape(a, (-1,))


def inject_context(placement: str, site: str, base: nn.Tensor, context: nn.Tensor | None) -> nn.Tensor:
    """Concatenate ``context`` to ``base`` if ``placement`` feeds ``site``."""
    if site not in placement_sites(placement):
        if context is not None:
            raise ValueError(f"placement {placement!r} takes no context at {site}")
        return base
    if context is None:
        raise ValueError(f"placement {placement!r} needs an audio context at {site}")
    return nn.concat([base, context], axis=-1)
