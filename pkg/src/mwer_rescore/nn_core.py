"""Small define-by-run reverse-mode autodiff engine on top of numpy.

Every value is a float64 ndarray wrapped in :class:`Tensor`.  Operations
executed while a :class:`Tape` is active (``with Tape() as tape:``) and that
touch at least one tensor with ``requires_grad`` are recorded; ``backward``
replays the record in reverse.  Outside a tape the same functions are plain
numpy computations, which is what inference uses.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DimensionError",
    "Tensor",
    "Tape",
    "parameter",
    "constant",
    "glorot_uniform",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "affine",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sum",
    "mean",
    "concat",
    "stack",
    "index",
    "reshape",
    "masked_fill",
    "softmax",
    "log_softmax",
    "lstm_step",
    "conv2d_same",
    "max_pool_time",
    "conv_time",
]


class DimensionError(ValueError):
    """Raised when operand shapes do not conform."""


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class _Node:
    __slots__ = ("inputs", "outputs", "backward_fn")

    def __init__(self, inputs, outputs, backward_fn):
        self.inputs = inputs
        self.outputs = outputs
        self.backward_fn = backward_fn


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest and only the innermost one records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        """Drop every recorded node; parameter tensors are untouched."""
        self.nodes.clear()

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _record(inputs: Sequence[Tensor], outputs: Sequence[Tensor], backward_fn: Callable) -> None:
    if not _ACTIVE:
        return
    if not any(t.requires_grad for t in inputs):
        return
    for out in outputs:
        out.requires_grad = True
    _ACTIVE[-1].nodes.append(_Node(tuple(inputs), tuple(outputs), backward_fn))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad or g is None:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
    else:
        t.grad += g


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(.) to every tensor recorded on ``tape``.

    Parameter gradients accumulate; call ``zero_grad`` between steps.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(out) for node in tape.nodes for out in node.outputs}
    if id(loss) not in produced and not loss.requires_grad:
        raise ValueError("loss was not produced on this tape")
    # intermediate gradients from a previous replay of the same tape must not leak in
    for node in tape.nodes:
        for out in node.outputs:
            out.grad = None
    loss.grad = np.ones(loss.shape)
    for node in reversed(tape.nodes):
        gouts = [out.grad for out in node.outputs]
        if all(g is None for g in gouts):
            continue
        gouts = [np.zeros(out.shape) if g is None else g for g, out in zip(gouts, node.outputs)]
        grads = node.backward_fn(*gouts)
        for t, g in zip(node.inputs, grads):
            _accumulate(t, g)


def grad_check(
    fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-4, rel_floor: float = 1e-6
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must rebuild the scalar loss from ``inputs`` on every call.  The
    denominator of each entry is floored at ``rel_floor`` times the largest
    gradient entry of its tensor, since differencing cannot resolve entries
    far below that scale.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = fn()
    backward(tape, loss)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        flat = t.value.reshape(-1)
        numeric = np.empty(flat.size)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = fn().item()
            flat[k] = orig - eps
            down = fn().item()
            flat[k] = orig
            numeric[k] = (up - down) / (2 * eps)
        a = analytic.reshape(-1)
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), max(rel_floor * scale, 1e-8))
        worst = max(worst, float(np.max(np.abs(a - numeric) / denom, initial=0.0)))
    return worst


# ---------------------------------------------------------------------------
# elementwise and reductions


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    out = Tensor(a.value + b.value)
    _record((a, b), (out,), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    out = Tensor(a.value - b.value)
    _record((a, b), (out,), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    out = Tensor(a.value * b.value)
    _record(
        (a, b),
        (out,),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )
    return out


def neg(a) -> Tensor:
    return scale(a, -1.0)


def scale(a, k: float) -> Tensor:
    a = constant(a)
    out = Tensor(a.value * k)
    _record((a,), (out,), lambda g: (g * k,))
    return out


def sigmoid(a) -> Tensor:
    a = constant(a)
    s = _sigmoid(a.value)
    out = Tensor(s)
    _record((a,), (out,), lambda g: (g * s * (1.0 - s),))
    return out


def tanh(a) -> Tensor:
    a = constant(a)
    t = np.tanh(a.value)
    out = Tensor(t)
    _record((a,), (out,), lambda g: (g * (1.0 - t * t),))
    return out


def exp(a) -> Tensor:
    a = constant(a)
    e = np.exp(a.value)
    out = Tensor(e)
    _record((a,), (out,), lambda g: (g * e,))
    return out


def log(a) -> Tensor:
    a = constant(a)
    out = Tensor(np.log(a.value))
    _record((a,), (out,), lambda g: (g / a.value,))
    return out


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = constant(a)
    out = Tensor(np.sum(a.value, axis=axis, keepdims=keepdims))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    _record((a,), (out,), back)
    return out


def mean(a, axis=None) -> Tensor:
    a = constant(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = constant(a)
    out = Tensor(a.value.reshape(shape))
    _record((a,), (out,), lambda g: (g.reshape(a.shape),))
    return out


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [constant(t) for t in tensors]
    out = Tensor(np.concatenate([t.value for t in tensors], axis=axis))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    _record(tensors, (out,), back)
    return out


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [constant(t) for t in tensors]
    out = Tensor(np.stack([t.value for t in tensors], axis=axis))

    def back(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(tensors)))

    _record(tensors, (out,), back)
    return out


def index(a, key) -> Tensor:
    """Basic or advanced numpy indexing; repeated indices accumulate on backward."""
    a = constant(a)
    out = Tensor(a.value[key])

    def back(g):
        full = np.zeros(a.shape)
        np.add.at(full, key, g)
        return (full,)

    _record((a,), (out,), back)
    return out


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value`` (no gradient there)."""
    a = constant(a)
    mask = np.broadcast_to(mask, a.shape)
    out = Tensor(np.where(mask, value, a.value))
    _record((a,), (out,), lambda g: (np.where(mask, 0.0, g),))
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.value.ndim == 0 or b.value.ndim == 0 or a.shape[-1] != b.shape[-2 if b.value.ndim > 1 else 0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not conform")
    out = Tensor(np.matmul(a.value, b.value))

    def back(g):
        av, bv = a.value, b.value
        if bv.ndim == 1:
            ga = np.multiply.outer(g, bv)
            gb = np.tensordot(av, g, axes=(tuple(range(av.ndim - 1)), tuple(range(g.ndim))))
            return _unbroadcast(ga, a.shape), gb
        if av.ndim == 1:
            ga = np.matmul(g, np.swapaxes(bv, -1, -2))
            gb = np.multiply.outer(av, g)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    _record((a, b), (out,), back)
    return out


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    x, W, b = constant(x), constant(W), constant(b)
    if W.value.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"affine: input shape {x.shape} does not match weight shape {W.shape}")
    if b.shape != (W.shape[1],):
        raise DimensionError(f"affine: bias shape {b.shape} does not match weight shape {W.shape}")
    xv = x.value
    out = Tensor(xv @ W.value + b.value)

    def back(g):
        x2 = xv.reshape(-1, xv.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        return g @ W.value.T, x2.T @ g2, g2.sum(axis=0)

    _record((x, W, b), (out,), back)
    return out


# ---------------------------------------------------------------------------
# softmax family


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _masked_shift(x: np.ndarray, axis: int, mask: np.ndarray | None):
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return x - m


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax; entries where ``mask`` is false get probability 0."""
    a = constant(a)
    if a.value.size == 0 or a.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    z = np.exp(_masked_shift(a.value, axis, mask))
    p = z / np.sum(z, axis=axis, keepdims=True)
    out = Tensor(p)

    def back(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    _record((a,), (out,), back)
    return out


def log_softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    a = constant(a)
    if a.value.size == 0 or a.shape[axis] == 0:
        raise DimensionError("log_softmax of an empty vector")
    shifted = _masked_shift(a.value, axis, mask)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    lp = shifted - lse
    if mask is not None:
        lp = np.where(mask, lp, 0.0)
    out = Tensor(lp)
    p = np.exp(np.where(mask, lp, -np.inf)) if mask is not None else np.exp(lp)

    def back(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    _record((a,), (out,), back)
    return out


# ---------------------------------------------------------------------------
# recurrent cell


def lstm_step(x, h, c, W_ih, W_hh, b) -> tuple[Tensor, Tensor]:
    """One LSTM cell update, gate order (input, forget, cell, output).

    Shapes: ``x`` [..., I], ``h``/``c`` [..., H], ``W_ih`` [I, 4H],
    ``W_hh`` [H, 4H], ``b`` [4H].  Returns ``(h_new, c_new)``.
    """
    x, h, c, W_ih, W_hh, b = (constant(t) for t in (x, h, c, W_ih, W_hh, b))
    H = W_hh.shape[0]
    if W_ih.shape[0] != x.shape[-1] or W_ih.shape[1] != 4 * H:
        raise DimensionError(f"lstm_step: input shape {x.shape} vs W_ih shape {W_ih.shape}")
    if h.shape[-1] != H or c.shape[-1] != H or W_hh.shape != (H, 4 * H):
        raise DimensionError(f"lstm_step: state shape {h.shape}/{c.shape} vs W_hh shape {W_hh.shape}")
    if b.shape != (4 * H,):
        raise DimensionError(f"lstm_step: bias shape {b.shape} vs hidden size {H}")
    xv, hv, cv = x.value, h.value, c.value
    z = xv @ W_ih.value + hv @ W_hh.value + b.value
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H : 2 * H])
    gg = np.tanh(z[..., 2 * H : 3 * H])
    o = _sigmoid(z[..., 3 * H :])
    c_new = f * cv + i * gg
    tc = np.tanh(c_new)
    h_out = Tensor(o * tc)
    c_out = Tensor(c_new)

    def back(gh, gc):
        gc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                gc * gg * i * (1.0 - i),
                gc * cv * f * (1.0 - f),
                gc * i * (1.0 - gg * gg),
                gh * tc * o * (1.0 - o),
            ],
            axis=-1,
        )
        dz2 = dz.reshape(-1, 4 * H)
        return (
            dz @ W_ih.value.T,
            dz @ W_hh.value.T,
            gc * f,
            xv.reshape(-1, xv.shape[-1]).T @ dz2,
            hv.reshape(-1, H).T @ dz2,
            dz2.sum(axis=0),
        )

    _record((x, h, c, W_ih, W_hh, b), (h_out, c_out), back)
    return h_out, c_out


# ---------------------------------------------------------------------------
# convolution over (time, feature) and pooling over time


def conv2d_same(x, kernel, bias) -> Tensor:
    """Single-channel 2-D convolution with zero same-padding.

    ``x`` [B, T, D], ``kernel`` [kt, kd] (odd sizes), ``bias`` scalar-shaped [1].
    """
    x, kernel, bias = constant(x), constant(kernel), constant(bias)
    if x.value.ndim != 3:
        raise DimensionError(f"conv2d_same expects [B, T, D] input, got {x.shape}")
    kt, kd = kernel.shape
    pt, pd = kt // 2, kd // 2
    xp = np.pad(x.value, ((0, 0), (pt, pt), (pd, pd)))
    patches = sliding_window_view(xp, (kt, kd), axis=(1, 2))  # [B, T, D, kt, kd]
    out = Tensor(np.einsum("btdij,ij->btd", patches, kernel.value) + bias.value[0])
    B, T, D = x.shape

    def back(g):
        gk = np.einsum("btdij,btd->ij", patches, g)
        gxp = np.zeros(xp.shape)
        kv = kernel.value
        for i in range(kt):
            for j in range(kd):
                gxp[:, i : i + T, j : j + D] += g * kv[i, j]
        return gxp[:, pt : pt + T, pd : pd + D], gk, np.array([g.sum()])

    _record((x, kernel, bias), (out,), back)
    return out


def max_pool_time(x, width: int, lengths: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Non-overlapping max pooling along axis 1 of a [B, T, ...] tensor.

    Frames at or beyond ``lengths[b]`` and the tail padding count as -inf, so
    each sequence yields ``ceil(len / width)`` pooled frames.  Pooled slots past
    that are zero-filled.  Returns the pooled tensor and the new lengths.
    """
    x = constant(x)
    B, T = x.shape[:2]
    if lengths is None:
        lengths = np.full(B, T)
    lengths = np.asarray(lengths)
    Tp = -(-T // width)
    valid = np.arange(T)[None, :] < lengths[:, None]
    vshape = valid.shape + (1,) * (x.value.ndim - 2)
    v = np.where(valid.reshape(vshape), x.value, -np.inf)
    pad = [(0, 0), (0, Tp * width - T)] + [(0, 0)] * (x.value.ndim - 2)
    v = np.pad(v, pad, constant_values=-np.inf)
    win = v.reshape((B, Tp, width) + x.shape[2:])
    arg = np.argmax(win, axis=2)
    pooled = np.take_along_axis(win, arg[:, :, None], axis=2)[:, :, 0]
    new_len = -(-lengths // width)
    keep = np.arange(Tp)[None, :] < new_len[:, None]
    pooled = np.where(keep.reshape(keep.shape + (1,) * (x.value.ndim - 2)), pooled, 0.0)
    out = Tensor(pooled)

    def back(g):
        g = np.where(keep.reshape(keep.shape + (1,) * (x.value.ndim - 2)), g, 0.0)
        gw = np.zeros(win.shape)
        np.put_along_axis(gw, arg[:, :, None], g[:, :, None], axis=2)
        gfull = gw.reshape((B, Tp * width) + x.shape[2:])[:, :T]
        return (np.where(valid.reshape(vshape), gfull, 0.0),)

    _record((x,), (out,), back)
    return out, new_len


def conv_time(frames, kernel, bias, pool: int = 3, lengths: np.ndarray | None = None):
    """3x3 same-padded convolution followed by width-``pool`` max pooling.

    Accepts [T, D] or batched [B, T, D] frames; frames past ``lengths`` are
    treated as zero for the convolution and excluded from pooling.  Returns
    ``(encoded, new_lengths)`` with ``new_lengths = ceil(lengths / pool)``.
    """
    frames = constant(frames)
    single = frames.value.ndim == 2
    if single:
        frames = reshape(frames, (1,) + frames.shape)
    B, T = frames.shape[:2]
    if T < 1:
        raise DimensionError("conv_time needs at least one frame")
    if lengths is None:
        lengths = np.full(B, T)
    lengths = np.asarray(lengths)
    valid = (np.arange(T)[None, :] < lengths[:, None])[:, :, None]
    x = frames if valid.all() else masked_fill(frames, ~valid, 0.0)
    y = conv2d_same(x, kernel, bias)
    pooled, new_len = max_pool_time(y, pool, lengths)
    if single:
        pooled = reshape(pooled, pooled.shape[1:])
    return pooled, new_len
