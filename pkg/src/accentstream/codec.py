"""Discrete content tokens: k-means codebooks, quantization and decoding."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dsp import FRAME_RATE, FeatureSequence


class CodebookError(ValueError):
    pass


@dataclass
class Codebook:
    centroids: np.ndarray
    seed: int = 0
    version: str = "v1"
    inertia_history: list[float] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise CodebookError("codebook needs K >= 2 centroids in a K x D matrix")
        if not np.all(np.isfinite(self.centroids)):
            raise CodebookError("centroids must be finite")
        if len(np.unique(self.centroids, axis=0)) != self.K:
            raise CodebookError("centroids must be pairwise distinct")

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class TokenSequence:
    tokens: np.ndarray
    frame_rate: float = FRAME_RATE

    def __post_init__(self) -> None:
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return len(self.tokens)

    def check(self, K: int) -> "TokenSequence":
        if len(self.tokens) and (self.tokens.min() < 0 or self.tokens.max() >= K):
            raise CodebookError(f"token id outside [0, {K})")
        return self


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # Expanded form is fast but can go slightly negative; the explicit
    # difference keeps exact zeros for exact matches (tie-break relies on it).
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _assign(x: np.ndarray, c: np.ndarray, block: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    labels = np.empty(len(x), dtype=np.int64)
    dmin = np.empty(len(x))
    for s in range(0, len(x), block):
        d = _sq_dists(x[s : s + block], c)
        labels[s : s + block] = np.argmin(d, axis=1)  # first minimum = smallest k
        dmin[s : s + block] = d[np.arange(len(d)), labels[s : s + block]]
    return labels, dmin


def _kmeans_pp(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0.0:
            # fewer distinct points than K remain uncovered; pick any unused row
            idx = rng.integers(len(x))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, len(x) - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def kmeans_train(
    features: np.ndarray | FeatureSequence | Sequence[FeatureSequence],
    K: int,
    max_iters: int = 100,
    seed: int = 0,
) -> Codebook:
    """Lloyd's algorithm with k-means++ seeding.

    Stops after ``max_iters`` or once no assignment changes. A cluster that
    empties out is re-seeded with the point farthest from its centroid.
    Per-iteration inertia is kept on ``Codebook.inertia_history``.
    """
    x = _pool(features)
    if len(x) < K:
        raise CodebookError(f"{len(x)} rows cannot seed {K} clusters")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, K, rng)
    labels, dmin = _assign(x, centers)
    history = []
    for _ in range(max_iters):
        for k in range(K):
            members = labels == k
            if members.any():
                centers[k] = x[members].mean(axis=0)
        for k in range(K):
            if not np.any(labels == k):
                far = int(np.argmax(dmin))
                centers[k] = x[far]
                labels[far] = k
                dmin[far] = 0.0
        new_labels, dmin = _assign(x, centers)
        history.append(float(dmin.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    centers = _separate_duplicates(centers)
    book = Codebook(centers, seed=seed)
    book.inertia_history = history
    return book


def _separate_duplicates(centers: np.ndarray) -> np.ndarray:
    # Only reachable when the data has fewer distinct rows than K.
    _, first = np.unique(centers, axis=0, return_index=True)
    dup = np.setdiff1d(np.arange(len(centers)), first)
    for n, k in enumerate(dup, start=1):
        centers[k] = centers[k] + n * 1e-9
    return centers


def _pool(features) -> np.ndarray:
    if isinstance(features, FeatureSequence):
        return features.frames
    if isinstance(features, np.ndarray):
        return np.asarray(features, dtype=np.float64)
    return np.concatenate([f.frames for f in features], axis=0)


def quantize(features: FeatureSequence | np.ndarray, codebook: Codebook) -> TokenSequence:
    """Nearest centroid by squared Euclidean distance; ties go to the smallest id."""
    x = features.frames if isinstance(features, FeatureSequence) else np.atleast_2d(features)
    if x.shape[1] != codebook.dim:
        raise CodebookError(f"feature dim {x.shape[1]} != codebook dim {codebook.dim}")
    if len(x) == 0:
        return TokenSequence(np.zeros(0, dtype=np.int64))
    labels, _ = _assign(x, codebook.centroids)
    return TokenSequence(labels)


def decode_tokens(tokens: TokenSequence | Sequence[int], codebook: Codebook, width: int = 1) -> FeatureSequence:
    """Centroid lookup, optionally smoothed by a centred moving average.

    ``width`` must be odd; near the ends the average runs over whatever
    frames exist inside the window.
    """
    ids = tokens.tokens if isinstance(tokens, TokenSequence) else np.asarray(tokens, dtype=np.int64)
    TokenSequence(ids).check(codebook.K)
    frames = codebook.centroids[ids]
    if width > 1 and len(frames):
        frames = smooth(frames, width)
    return FeatureSequence(frames.reshape(len(ids), codebook.dim))


def smooth(frames: np.ndarray, width: int) -> np.ndarray:
    if width % 2 != 1:
        raise ValueError("smoothing width must be odd")
    half = width // 2
    T = len(frames)
    csum = np.vstack([np.zeros((1, frames.shape[1])), np.cumsum(frames, axis=0)])
    lo = np.maximum(0, np.arange(T) - half)
    hi = np.minimum(T, np.arange(T) + half + 1)
    return (csum[hi] - csum[lo]) / (hi - lo)[:, None]


def dedup(tokens: TokenSequence | Sequence[int]) -> np.ndarray:
    ids = tokens.tokens if isinstance(tokens, TokenSequence) else np.asarray(tokens, dtype=np.int64)
    if len(ids) == 0:
        return ids.copy()
    keep = np.ones(len(ids), dtype=bool)
    keep[1:] = ids[1:] != ids[:-1]
    return ids[keep]


# -------------------------------------------------------------------- file io


def save_codebook(codebook: Codebook, path: str | Path) -> None:
    lines = [f"PHN-CB v1 {codebook.K} {codebook.dim} {codebook.seed}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in codebook.centroids]
    Path(path).write_text("\n".join(lines) + "\n")


def load_codebook(path: str | Path) -> Codebook:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 5 or head[:2] != ["PHN-CB", "v1"]:
        raise CodebookError(f"{path}: not a PHN-CB v1 file")
    K, D, seed = int(head[2]), int(head[3]), int(head[4])
    rows = [[float(v) for v in line.split()] for line in lines[1 : 1 + K]]
    return Codebook(np.array(rows).reshape(K, D), seed=seed)


def format_tokens(tokens: Sequence[int]) -> str:
    return ",".join(str(int(t)) for t in tokens)


def parse_tokens(text: str) -> np.ndarray:
    text = text.strip()
    if not text:
        return np.zeros(0, dtype=np.int64)
    return np.array([int(t) for t in text.split(",")], dtype=np.int64)


def write_token_file(seqs: Sequence[Sequence[int]], path: str | Path) -> None:
    Path(path).write_text("".join(format_tokens(s) + "\n" for s in seqs))


def read_token_file(path: str | Path) -> list[np.ndarray]:
    return [parse_tokens(line) for line in Path(path).read_text().splitlines()]
