"""Connectionist temporal classification loss with an alpha-beta gradient.

The forward variable runs in log space over the blank-interleaved label
sequence ``[b, y1, b, y2, ..., yL, b]``. The gradient with respect to the
logits is ``softmax - occupancy``, where occupancy is the posterior mass
of every extended state at every frame.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor

NEG_INF = -np.inf


class CTCInfeasibleError(ValueError):
    """Target needs more frames than the input provides."""


def min_frames(target: Sequence[int]) -> int:
    t = np.asarray(target)
    repeats = int(np.sum(t[1:] == t[:-1])) if len(t) > 1 else 0
    return len(t) + repeats


def _extend(target: np.ndarray, blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def _shift(x: np.ndarray, k: int) -> np.ndarray:
    """Shift right by ``k`` states (k > 0) or left by ``-k``, filling with -inf."""
    out = np.full_like(x, NEG_INF)
    S = x.shape[1]
    if abs(k) >= S:
        return out
    if k > 0:
        out[:, k:] = x[:, : S - k]
    else:
        out[:, : S + k] = x[:, -k:]
    return out


def _lse(*xs: np.ndarray) -> np.ndarray:
    m = np.maximum.reduce(xs)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(sum(np.exp(x - safe) for x in xs))


def ctc_forward_backward(
    log_probs: np.ndarray,
    targets: Sequence[Sequence[int]],
    blank: int,
    input_lengths: Sequence[int] | None = None,
):
    """Per-utterance negative log-likelihood and frame/class occupancy.

    ``log_probs`` is (B, T, C) log-softmax output; utterance b uses its
    first ``input_lengths[b]`` frames (all T by default). Returns
    ``(nll, occ)`` with ``nll`` of shape (B,) and ``occ`` of shape
    (B, T, C), zero past each utterance's end.
    """
    B, T, C = log_probs.shape
    lens = np.full(B, T, dtype=np.int64) if input_lengths is None else np.asarray(input_lengths, dtype=np.int64)
    if len(lens) != B or np.any(lens < 1) or np.any(lens > T):
        raise ValueError("input lengths must lie in [1, T]")
    tgts = [np.asarray(t, dtype=np.int64).reshape(-1) for t in targets]
    if len(tgts) != B:
        raise ValueError(f"{len(tgts)} targets for batch of {B}")
    for t, n in zip(tgts, lens):
        if len(t) and (t.min() < 0 or t.max() >= C or np.any(t == blank)):
            raise ValueError("CTC targets must be non-blank class ids")
        if min_frames(t) > n:
            raise CTCInfeasibleError(f"target of length {len(t)} needs {min_frames(t)} frames, have {n}")

    S = 2 * max(len(t) for t in tgts) + 1
    ext = np.full((B, S), blank, dtype=np.int64)
    valid = np.zeros((B, S), dtype=bool)
    skip = np.zeros((B, S), dtype=bool)  # transition s-2 -> s allowed
    lengths = np.empty(B, dtype=np.int64)
    for b, t in enumerate(tgts):
        e = _extend(t, blank)
        ext[b, : len(e)] = e
        valid[b, : len(e)] = True
        lengths[b] = len(e)
        if len(e) > 2:
            skip[b, 2 : len(e)] = (e[2:] != blank) & (e[2:] != e[:-2])

    emit = np.take_along_axis(log_probs, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    emit = np.where(valid[:, None, :], emit, NEG_INF)

    alpha = np.full((B, T, S), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 0, 1] = np.where(lengths > 1, emit[:, 0, 1], NEG_INF)
    for t in range(1, T):
        prev = alpha[:, t - 1]
        s2 = np.where(skip, _shift(prev, 2), NEG_INF)
        alpha[:, t] = _lse(prev, _shift(prev, 1), s2) + emit[:, t]

    rows = np.arange(B)
    last = alpha[rows, lens - 1, lengths - 1]
    second = np.where(lengths > 1, alpha[rows, lens - 1, np.maximum(lengths - 2, 0)], NEG_INF)
    log_p = _lse(last, second)

    # beta excludes the emission at its own frame
    final = np.full((B, S), NEG_INF)
    final[rows, lengths - 1] = 0.0
    final[rows[lengths > 1], lengths[lengths > 1] - 2] = 0.0
    beta = np.full((B, T, S), NEG_INF)
    beta[:, T - 1] = np.where((lens == T)[:, None], final, NEG_INF)
    skip_next = np.zeros((B, S), dtype=bool)  # transition s -> s+2 allowed
    skip_next[:, :-2] = skip[:, 2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[:, t + 1] + emit[:, t + 1]
        n2 = np.where(skip_next, _shift(nxt, -2), NEG_INF)
        rec = _lse(nxt, _shift(nxt, -1), n2)
        at_end = (lens - 1 == t)[:, None]
        beta[:, t] = np.where(at_end, final, np.where((lens - 1 > t)[:, None], rec, NEG_INF))

    with np.errstate(invalid="ignore"):
        post = np.exp(alpha + beta - log_p[:, None, None])
    post = np.where(np.isnan(post), 0.0, post)
    onehot = np.zeros((B, S, C))
    onehot[rows[:, None], np.arange(S)[None, :], ext] = valid
    occ = np.einsum("bts,bsc->btc", post, onehot)
    return -log_p, occ


def ctc_loss(
    logits: Tensor,
    targets: Sequence[Sequence[int]],
    blank: int | None = None,
    input_lengths: Sequence[int] | None = None,
) -> Tensor:
    """Mean over the batch of ``-log P(target | logits)``.

    ``logits`` is (B, T, C) or (T, C); ``blank`` defaults to the last class.
    """
    z = logits.data
    single = z.ndim == 2
    if single:
        z = z[None]
        targets = [targets]
    B, T, C = z.shape
    blank = C - 1 if blank is None else blank
    z64 = z.astype(np.float64)
    shifted = z64 - z64.max(axis=2, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=2, keepdims=True))
    nll, occ = ctc_forward_backward(log_probs, targets, blank, input_lengths)
    loss = nll.mean()

    def backward(g):
        grad = (np.exp(log_probs) - occ) / B
        if input_lengths is not None:
            grad = np.where(np.arange(T)[None, :, None] < np.asarray(input_lengths)[:, None, None], grad, 0.0)
        if single:
            grad = grad[0]
        logits._accumulate((g * grad).astype(logits.dtype))

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), "ctc", backward)
