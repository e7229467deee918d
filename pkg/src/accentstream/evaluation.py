"""Accent-neutralization and speaker-similarity metrics.

A probe maps an utterance to a posterior over accent classes; some of those
classes count as native. From paired (original, converted) posteriors we
report the share classified native / non-native and the mean shift of
native posterior mass. Speaker similarity is the cosine between pooled
feature statistics.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .codec import TokenSequence
from .dsp import EmptySequenceError, FeatureSequence, VadMask, energy_vad
from .stream import parse_key_values
from .train import SyntheticAccentTask


class ProbeError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeSpec:
    classes: tuple[str, ...]
    native: frozenset[str]

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "native", frozenset(self.native))
        if len(set(self.classes)) != len(self.classes):
            raise ProbeError("duplicate accent class names")
        if not self.native or not self.native < set(self.classes):
            raise ProbeError("native classes must be a non-empty strict subset of the classes")

    @property
    def native_index(self) -> np.ndarray:
        return np.array([c in self.native for c in self.classes])


SYNTHETIC_PROBE = ProbeSpec(("native", "non-native"), frozenset({"native"}))


@dataclass(frozen=True)
class ProbePosterior:
    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or len(p) == 0:
            raise ProbeError("posterior must be a non-empty vector")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ProbeError("posterior must be non-negative and sum to 1")
        object.__setattr__(self, "probs", p)

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.probs))  # first maximum, i.e. lower index on ties


@dataclass(frozen=True)
class AccentMetrics:
    c_na: float  # percent of converted utterances classified native
    c_nn: float
    delta_p: float
    n: int


def native_mass(post: ProbePosterior, spec: ProbeSpec) -> float:
    if len(post.probs) != len(spec.classes):
        raise ProbeError(f"posterior has {len(post.probs)} classes, probe spec has {len(spec.classes)}")
    return float(min(1.0, post.probs[spec.native_index].sum()))


def accent_metrics(
    originals: Sequence[ProbePosterior], converted: Sequence[ProbePosterior], spec: ProbeSpec = SYNTHETIC_PROBE
) -> AccentMetrics:
    if len(originals) != len(converted):
        raise ProbeError(f"{len(originals)} originals vs {len(converted)} converted")
    if not converted:
        raise ProbeError("no utterances to score")
    shift = [native_mass(c, spec) - native_mass(o, spec) for o, c in zip(originals, converted)]
    native = spec.native_index
    n_native = sum(bool(native[c.argmax]) for c in converted)
    c_na = 100.0 * n_native / len(converted)
    return AccentMetrics(c_na, 100.0 - c_na, float(np.mean(shift)), len(converted))


def accent_rate(tokens: TokenSequence | Sequence[int], task: SyntheticAccentTask) -> float:
    """Fraction of non-silence tokens that carry an accent-marked id."""
    ids = tokens.tokens if isinstance(tokens, TokenSequence) else np.asarray(tokens, dtype=np.int64)
    if len(ids) == 0:
        raise EmptySequenceError("cannot probe an empty token sequence")
    voiced = ids[ids != task.silence_id]
    if len(voiced) == 0:
        return 0.0
    return float(np.isin(voiced, sorted(task.accent_ids)).mean())


def synthetic_probe(
    tokens: TokenSequence | Sequence[int],
    task: SyntheticAccentTask,
    alpha: float = 20.0,
    beta: float | None = None,
) -> ProbePosterior:
    """Two-class posterior (native, non-native) from the accent-token rate.

    ``p(non-native) = logistic(alpha * (rate - beta))`` with ``beta``
    defaulting to half the task's substitution rate.
    """
    if beta is None:
        beta = task.substitution_rate / 2
    z = alpha * (accent_rate(tokens, task) - beta)
    p_nn = 0.5 * (1.0 + math.tanh(z / 2))  # numerically safe logistic
    return ProbePosterior(np.array([1.0 - p_nn, p_nn]))


# ------------------------------------------------------------ speaker identity


def speaker_embedding(features: FeatureSequence, vad: VadMask | None = None) -> np.ndarray:
    """Per-dimension mean and standard deviation over voiced frames (length 2D)."""
    if len(features) == 0:
        raise EmptySequenceError("no frames to embed")
    mask = (vad if vad is not None else energy_vad(features)).voiced
    if len(mask) != len(features):
        raise ValueError("VAD mask length differs from the features")
    if not mask.any():
        raise EmptySequenceError("all frames are silent")
    voiced = features.frames[mask]
    return np.concatenate([voiced.mean(axis=0), voiced.std(axis=0)])


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# ------------------------------------------------------------------- reports


@dataclass(frozen=True)
class UtteranceScore:
    utt_id: str
    p_na_orig: float
    p_na_conv: float
    spk_sim: float


def format_metrics(metrics: AccentMetrics, scores: Sequence[UtteranceScore]) -> str:
    sims = np.array([s.spk_sim for s in scores], dtype=np.float64)
    kv = {
        "c_na": metrics.c_na,
        "c_nn": metrics.c_nn,
        "delta_p": metrics.delta_p,
        "spk_sim_mean": float(sims.mean()) if len(sims) else float("nan"),
        "spk_sim_std": float(sims.std()) if len(sims) else float("nan"),
        "n": metrics.n,
    }
    return "".join(f"{k} = {v!r}\n" for k, v in kv.items())


def parse_metrics(text: str) -> dict[str, float]:
    return {k: float(v) for k, v in parse_key_values(text).items()}


def format_scores_csv(scores: Sequence[UtteranceScore]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "p_na_orig", "p_na_conv", "spk_sim"])
    for s in scores:
        w.writerow([s.utt_id, repr(s.p_na_orig), repr(s.p_na_conv), repr(s.spk_sim)])
    return buf.getvalue()
