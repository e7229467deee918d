"""Golden-target construction: silence-aware DTW of native onto non-native timing.

The native (L1) utterance is stripped of silence, warped onto the voiced
frames of the non-native (L2) utterance, and silence rows are put back at
exactly the L2's unvoiced positions. Quantizing the result gives
frame-aligned native tokens at L2 timing, plus a de-duplicated sequence
for CTC supervision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .codec import Codebook, dedup, format_tokens, parse_tokens, quantize
from .dsp import FeatureSequence, VadMask, runs, silence_row


class AlignmentError(ValueError):
    pass


@dataclass
class CostMatrix:
    costs: np.ndarray

    def __post_init__(self) -> None:
        self.costs = np.asarray(self.costs, dtype=np.float64)
        if self.costs.ndim != 2:
            raise AlignmentError("cost matrix must be 2-D")
        if not np.all(np.isfinite(self.costs)) or np.any(self.costs < 0):
            raise AlignmentError("costs must be finite and non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.costs.shape


@dataclass
class WarpPath:
    steps: list[tuple[int, int]]

    def __post_init__(self) -> None:
        if not self.steps or self.steps[0] != (0, 0):
            raise AlignmentError("warp path must start at (0, 0)")
        for (i0, j0), (i1, j1) in zip(self.steps, self.steps[1:]):
            if (i1 - i0, j1 - j0) not in ((1, 0), (0, 1), (1, 1)):
                raise AlignmentError(f"illegal step ({i0},{j0}) -> ({i1},{j1})")

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    @property
    def end(self) -> tuple[int, int]:
        return self.steps[-1]


@dataclass
class SilenceProfile:
    runs: list[tuple[int, int]] = field(default_factory=list)
    total_len: int = 0

    @classmethod
    def from_mask(cls, mask: VadMask) -> "SilenceProfile":
        return cls(runs(mask.voiced, value=False), len(mask))


@dataclass
class GoldenTarget:
    frame_tokens: np.ndarray
    ctc_tokens: np.ndarray
    source_ids: str = ""

    def __post_init__(self) -> None:
        self.frame_tokens = np.asarray(self.frame_tokens, dtype=np.int64)
        self.ctc_tokens = np.asarray(self.ctc_tokens, dtype=np.int64)


def cost_matrix(a: FeatureSequence | np.ndarray, b: FeatureSequence | np.ndarray) -> CostMatrix:
    """Cosine distance ``1 - cos(a_i, b_j)``; a zero-norm frame costs exactly 1."""
    x = a.frames if isinstance(a, FeatureSequence) else np.asarray(a, dtype=np.float64)
    y = b.frames if isinstance(b, FeatureSequence) else np.asarray(b, dtype=np.float64)
    if len(x) == 0 or len(y) == 0:
        raise AlignmentError("cannot build a cost matrix for an empty sequence")
    if x.shape[1] != y.shape[1]:
        raise AlignmentError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    denom = np.outer(nx, ny)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(denom > 0, (x @ y.T) / np.where(denom > 0, denom, 1.0), 0.0)
    return CostMatrix(np.clip(1.0 - cos, 0.0, 2.0))


def dtw(costs: CostMatrix | np.ndarray) -> tuple[WarpPath, float]:
    """Minimum-cost monotonic alignment with steps (1,0), (0,1), (1,1).

    Backtrace ties prefer the diagonal, then (1,0), then (0,1). The
    returned cost is re-summed along the path.
    """
    c = costs.costs if isinstance(costs, CostMatrix) else CostMatrix(costs).costs
    n, m = c.shape
    if n == 0 or m == 0:
        raise AlignmentError("empty cost matrix")
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    cl = c.tolist()
    al = acc.tolist()
    for i in range(1, n + 1):
        prev, row, ci = al[i - 1], al[i], cl[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if row[j - 1] < best:
                best = row[j - 1]
            row[j] = ci[j - 1] + best
    acc = np.array(al)

    i, j = n, m
    steps = [(n - 1, m - 1)]
    while (i, j) != (1, 1):
        diag, up, left = acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]
        if diag <= up and diag <= left:
            i, j = i - 1, j - 1
        elif up <= left:
            i -= 1
        else:
            j -= 1
        steps.append((i - 1, j - 1))
    steps.reverse()
    total = float(sum(c[p, q] for p, q in steps))
    return WarpPath(steps), total


def resample_by_path(l1: FeatureSequence, path: WarpPath, target_len: int) -> FeatureSequence:
    """Target frame j becomes the mean of every L1 frame aligned to it."""
    x = l1.frames
    sums = np.zeros((target_len, x.shape[1]))
    counts = np.zeros(target_len)
    for i, j in path:
        if not (0 <= i < len(x) and 0 <= j < target_len):
            raise AlignmentError(f"path index ({i}, {j}) out of range")
        sums[j] += x[i]
        counts[j] += 1
    if np.any(counts == 0):
        raise AlignmentError("path does not cover every target frame")
    return FeatureSequence(sums / counts[:, None], l1.frame_rate)


def silence_aware_align(
    l1: FeatureSequence,
    l2: FeatureSequence,
    l1_vad: VadMask,
    l2_vad: VadMask,
    normalize: bool = True,
) -> FeatureSequence:
    """Warp the voiced part of ``l1`` onto the voiced part of ``l2``.

    Output has ``len(l2)`` frames: silence rows at L2's unvoiced positions,
    warped native content elsewhere. With ``normalize`` the DTW distance is
    computed on mean-removed voiced frames (cosine on raw log-mels is
    dominated by their common offset); the warped output is always built
    from the raw L1 frames.
    """
    if len(l1_vad) != len(l1) or len(l2_vad) != len(l2):
        raise AlignmentError("VAD mask length does not match its feature sequence")
    if l1.dim != l2.dim:
        raise AlignmentError(f"feature dims differ: {l1.dim} vs {l2.dim}")
    v1, v2 = l1_vad.voiced, l2_vad.voiced
    if not v1.any() or not v2.any():
        raise AlignmentError("both utterances need at least one voiced frame")
    x1, x2 = l1.frames[v1], l2.frames[v2]
    if normalize:
        a, b = x1 - x1.mean(axis=0), x2 - x2.mean(axis=0)
    else:
        a, b = x1, x2
    path, _ = dtw(cost_matrix(a, b))
    warped = resample_by_path(FeatureSequence(x1, l1.frame_rate), path, len(x2))
    out = np.tile(silence_row(l2.dim), (len(l2), 1))
    out[v2] = warped.frames
    return FeatureSequence(out, l2.frame_rate)


def build_golden_target(
    aligned_l1: FeatureSequence, l2_vad: VadMask, codebook: Codebook, source_ids: str = ""
) -> GoldenTarget:
    if codebook is None or codebook.K == 0:
        raise AlignmentError("empty codebook")
    if len(aligned_l1) != len(l2_vad):
        raise AlignmentError("aligned sequence and mask lengths differ")
    if not l2_vad.voiced.any():
        raise AlignmentError("fully silent utterance has no CTC target")
    frame_tokens = quantize(aligned_l1, codebook).tokens
    ctc = dedup(frame_tokens[l2_vad.voiced])
    return GoldenTarget(frame_tokens, ctc, source_ids)


# ------------------------------------------------------------------ manifests


def format_golden(target: GoldenTarget) -> str:
    return f"{target.source_ids}\t{format_tokens(target.frame_tokens)}\t{format_tokens(target.ctc_tokens)}"


def parse_golden(line: str) -> GoldenTarget:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 3:
        raise ValueError(f"golden manifest line needs 3 tab-separated fields: {line!r}")
    return GoldenTarget(parse_tokens(parts[1]), parse_tokens(parts[2]), parts[0])


def write_golden_manifest(targets: Iterable[GoldenTarget], path: str | Path) -> None:
    Path(path).write_text("".join(format_golden(t) + "\n" for t in targets))


def read_golden_manifest(path: str | Path) -> list[GoldenTarget]:
    return [parse_golden(line) for line in Path(path).read_text().splitlines() if line.strip()]


def read_pair_manifest(path: str | Path) -> list[tuple[str, str, str]]:
    pairs = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{n}: expected pair_id<TAB>l1_wav<TAB>l2_wav")
        pairs.append((parts[0], parts[1], parts[2]))
    return pairs
