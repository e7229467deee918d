"""Independent reference implementations used as test oracles."""

import itertools
import math

import numpy as np


def brute_dtw(costs: np.ndarray) -> float:
    """Minimum path cost by enumerating every monotonic (1,0)/(0,1)/(1,1) path."""
    n, m = costs.shape
    best = math.inf

    def walk(i, j, acc):
        nonlocal best
        acc += costs[i, j]
        if i == n - 1 and j == m - 1:
            best = min(best, acc)
            return
        if i + 1 < n:
            walk(i + 1, j, acc)
        if j + 1 < m:
            walk(i, j + 1, acc)
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, acc)

    walk(0, 0, 0.0)
    return best


def all_paths(n: int, m: int):
    """Every monotonic path from (0, 0) to (n-1, m-1) as a list of cells."""
    out = []

    def walk(path):
        i, j = path[-1]
        if (i, j) == (n - 1, m - 1):
            out.append(list(path))
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            if i + di < n and j + dj < m:
                path.append((i + di, j + dj))
                walk(path)
                path.pop()

    walk([(0, 0)])
    return out


def collapse(path, blank: int) -> tuple:
    out = []
    prev = None
    for c in path:
        if c != prev and c != blank:
            out.append(c)
        prev = c
    return tuple(out)


def brute_ctc_nll(logits: np.ndarray, target, blank: int) -> float:
    """-log sum over every length-T label path that collapses to ``target``."""
    T, C = logits.shape
    logp = np.array([[v - math.log(sum(math.exp(u) for u in row)) for v in row] for row in logits])
    target = tuple(int(t) for t in target)
    terms = []
    for path in itertools.product(range(C), repeat=T):
        if collapse(path, blank) == target:
            terms.append(sum(logp[t, c] for t, c in enumerate(path)))
    top = max(terms)
    return -(top + math.log(sum(math.exp(v - top) for v in terms)))


def numeric_grad(loss_fn, param, h: float = 1e-4, limit: int | None = None, seed: int = 0):
    """Central differences on (a sample of) the entries of ``param``.

    Returns ``(flat_indices, estimates)``.
    """
    flat = param.data.reshape(-1)
    idx = np.arange(flat.size)
    if limit is not None and flat.size > limit:
        idx = np.sort(np.random.default_rng(seed).choice(flat.size, size=limit, replace=False))
    est = np.empty(len(idx))
    for n, i in enumerate(idx):
        keep = flat[i]
        flat[i] = keep + h
        up = loss_fn().item()
        flat[i] = keep - h
        down = loss_fn().item()
        flat[i] = keep
        est[n] = (up - down) / (2 * h)
    return idx, est


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def direct_mel_energies(frame: np.ndarray, n_mels: int, sample_rate: int) -> np.ndarray:
    """Hann-windowed DFT by explicit summation, HTK triangular mel bands built from scratch."""
    N = len(frame)
    n = np.arange(N)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * n / (N - 1))
    x = frame * window
    bins = N // 2 + 1
    power = np.empty(bins)
    for k in range(bins):
        re = sum(x[t] * math.cos(2 * math.pi * k * t / N) for t in range(N))
        im = -sum(x[t] * math.sin(2 * math.pi * k * t / N) for t in range(N))
        power[k] = re * re + im * im

    def mel(f):
        return 2595.0 * math.log10(1.0 + f / 700.0)

    def imel(m):
        return 700.0 * (10 ** (m / 2595.0) - 1.0)

    top = mel(sample_rate / 2)
    pts = [imel(top * i / (n_mels + 1)) for i in range(n_mels + 2)]
    out = np.zeros(n_mels)
    for b in range(n_mels):
        lo, c, hi = pts[b], pts[b + 1], pts[b + 2]
        for k in range(bins):
            f = k * sample_rate / N
            if lo < f < hi:
                w = (f - lo) / (c - lo) if f <= c else (hi - f) / (hi - c)
                out[b] += w * power[k]
    return out
