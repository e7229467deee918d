"""Token-to-token accent translator and its CE / CTC / joint losses.

    tokens -> embedding -> ConvNeXt x front_layers -> windowed transformer x tf_layers
           -> gated skip(transformer out, front out) -> ConvNeXt x rear_layers
           -> LayerNorm -> linear head over K + 1 classes (blank = K)

Only one transformer layer looks ahead, so the whole network reads at
most ``future_frames`` frames into the future.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import tensor as F
from .nn.ctc import ctc_loss as _ctc
from .nn.layers import ContextWindow, ConvNeXtBlock, Embedding, GatedSkip, LayerNorm, Linear, Module, TransformerLayer
from .nn.tensor import Tensor

FRAME_MS = 20


class TokenRangeError(ValueError):
    pass


@dataclass(frozen=True)
class TranslatorConfig:
    vocab: int = 16
    width: int = 64
    kernel: int = 7
    front_layers: int = 3
    rear_layers: int = 3
    tf_layers: int = 2
    heads: int = 2
    past_ms: int = 500
    future_ms: int = 40
    lookahead_layer: int = -1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        if self.past_ms % FRAME_MS or self.future_ms % FRAME_MS:
            raise ValueError("context sizes must be whole 20 ms frames")
        if self.tf_layers < 1:
            raise ValueError("need at least one transformer layer")

    @property
    def classes(self) -> int:
        return self.vocab + 1

    @property
    def blank(self) -> int:
        return self.vocab

    @property
    def past_frames(self) -> int:
        return self.past_ms // FRAME_MS

    @property
    def future_frames(self) -> int:
        return self.future_ms // FRAME_MS

    @property
    def receptive_past(self) -> int:
        """How far back an output frame can see through the whole stack."""
        conv = (self.front_layers + self.rear_layers) * (self.kernel - 1)
        return conv + self.tf_layers * self.past_frames

    @classmethod
    def full_scale(cls, **overrides) -> "TranslatorConfig":
        base = dict(vocab=200, width=256, tf_layers=10, heads=8)
        base.update(overrides)
        return cls(**base)


def parameter_count(cfg: TranslatorConfig) -> int:
    d, k, K = cfg.width, cfg.kernel, cfg.vocab
    convnext = k * d + d + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d)
    layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d)
    gate = 2 * d * d + d
    head = 2 * d + d * (K + 1) + (K + 1)
    return K * d + (cfg.front_layers + cfg.rear_layers) * convnext + cfg.tf_layers * layer + gate + head


@dataclass(frozen=True)
class LossWeights:
    lambda_ce: float = 1.0
    lambda_ctc: float = 1.0

    def __post_init__(self) -> None:
        if self.lambda_ce < 0 or self.lambda_ctc < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_ce == 0 and self.lambda_ctc == 0:
            raise ValueError("at least one loss weight must be positive")


class TranslatorModel(Module):
    def __init__(self, cfg: TranslatorConfig, dtype=np.float32):
        rng = np.random.default_rng(cfg.seed)
        d = cfg.width
        self.cfg = cfg
        self.embed = Embedding(cfg.vocab, d, rng, dtype)
        self.front = [ConvNeXtBlock(d, cfg.kernel, rng, dtype) for _ in range(cfg.front_layers)]
        look = cfg.lookahead_layer % cfg.tf_layers
        self.transformer = [
            TransformerLayer(
                d,
                cfg.heads,
                ContextWindow(cfg.past_frames, cfg.future_frames if i == look else 0),
                rng,
                dtype,
            )
            for i in range(cfg.tf_layers)
        ]
        self.skip = GatedSkip(d, rng, dtype)
        self.rear = [ConvNeXtBlock(d, cfg.kernel, rng, dtype) for _ in range(cfg.rear_layers)]
        self.norm = LayerNorm(d, dtype)
        self.head = Linear(d, cfg.classes, rng, dtype)

    @property
    def dtype(self):
        return self.head.weight.dtype

    def __call__(self, tokens) -> Tensor:
        return self.forward(tokens)

    def forward(self, tokens) -> Tensor:
        """Logits of shape (..., T, K + 1) for int tokens of shape (..., T)."""
        ids = _token_array(tokens)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab):
            raise TokenRangeError(f"token id outside [0, {self.cfg.vocab})")
        h = self.embed(ids)
        for block in self.front:
            h = block(h)
        z = h
        for layer in self.transformer:
            z = layer(z)
        r = self.skip(z, h)
        for block in self.rear:
            r = block(r)
        return self.head(self.norm(r))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()


def _token_array(tokens) -> np.ndarray:
    if hasattr(tokens, "tokens"):
        tokens = tokens.tokens
    return np.asarray(tokens, dtype=np.int64)


# ---------------------------------------------------------------------- losses


def ce_loss(logits: Tensor, frame_targets, label_smoothing: float = 0.0) -> Tensor:
    """Mean over frames of ``-log softmax(logits)[target]``."""
    tgt = _token_array(frame_targets)
    if tgt.shape != logits.shape[:-1]:
        raise ValueError(f"targets {tgt.shape} do not match logits {logits.shape[:-1]}")
    return F.cross_entropy(logits, tgt, label_smoothing)


def ctc_loss(logits: Tensor, target: Sequence[int] | Sequence[Sequence[int]], frames=None) -> Tensor:
    """``-log P(target)`` summed over CTC alignments; batched input averages over utterances.

    ``frames`` is an optional boolean mask shaped like ``logits.shape[:-1]``;
    when given, CTC runs over the selected frames only (in order), so e.g.
    silence frames can be left to the frame-level loss alone.
    """
    if logits.ndim == 2:
        if frames is None:
            return _ctc(logits, _token_array(target))
        return ctc_loss(F.reshape(logits, (1, *logits.shape)), [target], np.asarray(frames)[None])
    targets = [_token_array(t) for t in target]
    if frames is None:
        return _ctc(logits, targets)
    sel = np.asarray(frames, dtype=bool)
    if sel.shape != logits.shape[:-1]:
        raise ValueError(f"frame mask {sel.shape} does not match logits {logits.shape[:-1]}")
    lengths = sel.sum(axis=1)
    if np.any(lengths == 0):
        raise ValueError("CTC frame mask selects no frames for some utterance")
    width = int(lengths.max())
    rows = np.repeat(np.arange(len(sel))[:, None], width, axis=1)
    cols = np.zeros((len(sel), width), dtype=np.int64)
    for b, row in enumerate(sel):
        idx = np.flatnonzero(row)
        cols[b, : len(idx)] = idx
        cols[b, len(idx) :] = idx[-1]  # padding; its gradient is zero
    return _ctc(F.getitem(logits, (rows, cols)), targets, input_lengths=lengths)


def joint_loss(
    logits: Tensor,
    frame_targets,
    ctc_targets,
    w: LossWeights = LossWeights(),
    label_smoothing: float = 0.0,
    ctc_frames=None,
) -> tuple[Tensor, float, float]:
    """Weighted CE + CTC; also returns the two component values for logging.

    CE covers every frame; ``ctc_frames`` optionally restricts CTC to a subset.
    """
    ce = ce_loss(logits, frame_targets, label_smoothing) if w.lambda_ce else None
    ctc = ctc_loss(logits, ctc_targets, ctc_frames) if w.lambda_ctc else None
    if ce is None:
        total = ctc * w.lambda_ctc
    elif ctc is None:
        total = ce * w.lambda_ce
    else:
        total = ce * w.lambda_ce + ctc * w.lambda_ctc
    return total, (ce.item() if ce is not None else 0.0), (ctc.item() if ctc is not None else 0.0)


def predict(model: TranslatorModel, tokens) -> np.ndarray:
    """Greedy frame tokens with the blank class masked out."""
    logits = model.forward(tokens).data
    return np.argmax(logits[..., : model.cfg.vocab], axis=-1)
