"""Building blocks for the accent translator: ConvNeXt, windowed attention, gated skip."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as F
from .tensor import Tensor


@dataclass(frozen=True)
class ContextWindow:
    past_frames: int
    future_frames: int

    def __post_init__(self) -> None:
        if self.past_frames < 0 or self.future_frames < 0:
            raise ValueError("context window sizes must be non-negative")

    def mask(self, T: int) -> np.ndarray:
        """(T, T) boolean band: query t may read key s iff t - past <= s <= t + future."""
        t = np.arange(T)[:, None]
        s = np.arange(T)[None, :]
        return (s >= t - self.past_frames) & (s <= t + self.future_frames)


class Module:
    """Parameter container; children and tensors are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _const(value: float, shape, dtype) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64):
        self.weight = _uniform(rng, (d_in, d_out), d_in, dtype)
        self.bias = _const(0.0, (d_out,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float64, eps: float = 1e-5):
        self.gamma = _const(1.0, (d,), dtype)
        self.beta = _const(0.0, (d,), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, dtype=np.float64):
        self.table = _uniform(rng, (n, d), 1, dtype)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return F.embedding(self.table, ids)


class ConvNeXtBlock(Module):
    """Causal depthwise conv -> LayerNorm -> 4x pointwise MLP (GELU) -> residual."""

    def __init__(self, d: int, kernel: int, rng: np.random.Generator, dtype=np.float64, expansion: int = 4):
        if kernel < 1:
            raise ValueError("kernel must be >= 1")
        self.kernel = kernel
        self.dw_weight = _uniform(rng, (kernel, d), kernel, dtype)
        self.dw_bias = _const(0.0, (d,), dtype)
        self.norm = LayerNorm(d, dtype)
        self.expand = Linear(d, expansion * d, rng, dtype)
        self.project = Linear(expansion * d, d, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = F.causal_depthwise_conv(x, self.dw_weight, self.dw_bias)
        h = self.project(F.gelu(self.expand(self.norm(h))))
        return x + h


class TransformerLayer(Module):
    """Pre-norm transformer layer whose attention is limited to a context band."""

    def __init__(self, d: int, heads: int, window: ContextWindow, rng: np.random.Generator, dtype=np.float64):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.window = window
        self.norm1 = LayerNorm(d, dtype)
        self.qkv = Linear(d, 3 * d, rng, dtype)
        self.out = Linear(d, d, rng, dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.fc1 = Linear(d, 4 * d, rng, dtype)
        self.fc2 = Linear(4 * d, d, rng, dtype)

    def attention(self, x: Tensor) -> Tensor:
        *lead, T, D = x.shape
        H = self.heads
        dh = D // H
        qkv = self.qkv(x).reshape(*lead, T, 3, H, dh)
        n = len(lead)
        # -> (3, *lead, H, T, dh)
        qkv = F.transpose(qkv, (n + 1, *range(n), n + 2, n, n + 3))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ F.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        att = F.softmax(scores, axis=-1, mask=self.window.mask(T))
        ctx = att @ v  # (*lead, H, T, dh)
        ctx = F.transpose(ctx, (*range(n), n + 1, n, n + 2)).reshape(*lead, T, D)
        return self.out(ctx)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attention(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class GatedSkip(Module):
    """``g * deep + (1 - g) * skip`` with ``g = sigmoid(W [deep; skip] + b)``."""

    def __init__(self, d: int, rng: np.random.Generator, dtype=np.float64):
        self.gate = Linear(2 * d, d, rng, dtype)

    def __call__(self, deep: Tensor, skip: Tensor) -> Tensor:
        if deep.shape != skip.shape:
            raise ValueError(f"gated skip shape mismatch: {deep.shape} vs {skip.shape}")
        g = F.sigmoid(self.gate(F.concat([deep, skip], axis=-1)))
        return g * deep + (1.0 - g) * skip

