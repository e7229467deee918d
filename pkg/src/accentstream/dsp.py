"""Audio ingestion, log-mel features and a relative-energy VAD.

Everything here runs at 50 Hz (hop 320 samples at 16 kHz). Features are
``log(mel energy + EPS)`` so digital silence maps to a constant row of
``log(EPS)``; the align and stream modules rely on that representation.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

EPS = 1e-10
LOG_EPS = math.log(EPS)
SAMPLE_RATE = 16000
FRAME_RATE = 50.0


class WavError(ValueError):
    """Base class for WAV ingestion failures."""


class MalformedWavError(WavError):
    pass


class NotMonoError(WavError):
    pass


class NotPCM16Error(WavError):
    pass


class SampleRateMismatchError(WavError):
    pass


class EmptySequenceError(ValueError):
    """Audio too short to yield a single frame."""


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise NotMonoError("AudioBuffer holds mono samples only")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FrameSpec:
    frame_len: int = 400
    hop: int = 320
    n_mels: int = 40
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        if not 0 < self.hop <= self.frame_len:
            raise ValueError("need 0 < hop <= frame_len")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    def num_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_len:
            return 0
        return 1 + (n_samples - self.frame_len) // self.hop


@dataclass
class FeatureSequence:
    frames: np.ndarray
    frame_rate: float = FRAME_RATE

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError("frames must be a T x D matrix")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("features must be finite")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class VadMask:
    voiced: np.ndarray
    threshold_db: float = 30.0
    hangover_frames: int = 2

    def __post_init__(self) -> None:
        self.voiced = np.asarray(self.voiced, dtype=bool)

    def __len__(self) -> int:
        return len(self.voiced)


# --------------------------------------------------------------------- WAV io


def load_wav(path: str | Path, sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    """Read a mono PCM16 little-endian RIFF/WAVE file into [-1, 1] floats."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise NotPCM16Error(f"{path}: {msg}") from exc
        raise MalformedWavError(f"{path}: {msg}") from exc
    if channels != 1:
        raise NotMonoError(f"{path}: {channels} channels")
    if width != 2:
        raise NotPCM16Error(f"{path}: sample width {width} bytes")
    if rate != sample_rate:
        raise SampleRateMismatchError(f"{path}: {rate} Hz, expected {sample_rate}")
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioBuffer(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path: str | Path, audio: AudioBuffer) -> None:
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(audio.sample_rate)
        wf.writeframes(pcm.tobytes())


# ------------------------------------------------------------------- features


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular HTK-style filters, shape (n_fft // 2 + 1, n_mels)."""
    n_bins = n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    fb = np.zeros((n_bins, n_mels))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (bin_hz - lo) / (mid - lo)
        falling = (hi - bin_hz) / (hi - mid)
        fb[:, m] = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=8)
def _hann(n: int) -> np.ndarray:
    w = np.hanning(n)
    w.setflags(write=False)
    return w


def frame_features(frames: np.ndarray, spec: FrameSpec) -> np.ndarray:
    """Log-mel rows for an (N, frame_len) matrix of raw sample windows."""
    frames = np.atleast_2d(frames)
    spectrum = np.fft.rfft(frames * _hann(spec.frame_len), axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    mel = power @ mel_filterbank(spec.n_mels, spec.frame_len, spec.sample_rate)
    return np.log(mel + EPS)


def frame_signal(samples: np.ndarray, spec: FrameSpec) -> np.ndarray:
    n = spec.num_frames(len(samples))
    idx = np.arange(spec.frame_len)[None, :] + spec.hop * np.arange(n)[:, None]
    return samples[idx]


def extract_features(audio: AudioBuffer, spec: FrameSpec = FrameSpec()) -> FeatureSequence:
    """T = 1 + (len - frame_len) // hop frames of Hann-windowed log-mel energies."""
    if len(audio) < spec.frame_len:
        raise EmptySequenceError(
            f"{len(audio)} samples is shorter than one frame ({spec.frame_len})"
        )
    feats = frame_features(frame_signal(audio.samples, spec), spec)
    return FeatureSequence(feats, spec.frame_rate)


def causal_pad(audio: AudioBuffer, spec: FrameSpec = FrameSpec()) -> AudioBuffer:
    """Left-pad so frame t ends exactly at sample (t + 1) * hop.

    This is the framing the streaming runtime uses: every completed hop
    yields one frame, so N whole hops give exactly N frames.
    """
    pad = np.zeros(spec.frame_len - spec.hop)
    return AudioBuffer(np.concatenate([pad, audio.samples]), audio.sample_rate)


def silence_row(dim: int) -> np.ndarray:
    return np.full(dim, LOG_EPS)


# ------------------------------------------------------------------------ VAD


def energy_vad(
    features: FeatureSequence, threshold_db: float = 30.0, hangover_frames: int = 2
) -> VadMask:
    """Relative-energy voice activity detection with symmetric hangover.

    A frame is voiced when its log mean mel energy lies within
    ``threshold_db`` of the loudest frame. Frames sitting on the
    digital-silence floor are never voiced, whatever the utterance max is.
    """
    T = len(features)
    if T == 0:
        return VadMask(np.zeros(0, dtype=bool), threshold_db, hangover_frames)
    # log of the mean mel energy: a geometric mean over bands would let a
    # clean tone (most bands empty) sit far below a broadband click
    f = features.frames
    top = f.max(axis=1, keepdims=True)
    energy = top[:, 0] + np.log(np.exp(f - top).mean(axis=1))
    cutoff = energy.max() - threshold_db / 10.0 * math.log(10.0)
    floor = LOG_EPS + 1e-6
    raw = (energy > cutoff) & (energy > floor)
    voiced = raw.copy()
    if hangover_frames > 0 and raw.any():
        for t in np.flatnonzero(raw):
            lo = max(0, t - hangover_frames)
            hi = min(T, t + hangover_frames + 1)
            voiced[lo:hi] = True
    return VadMask(voiced, threshold_db, hangover_frames)


def runs(mask: np.ndarray, value: bool = False) -> list[tuple[int, int]]:
    """(start, length) of maximal runs equal to ``value``."""
    out = []
    start = None
    for t, v in enumerate(np.asarray(mask, dtype=bool)):
        if v == value and start is None:
            start = t
        elif v != value and start is not None:
            out.append((start, t - start))
            start = None
    if start is not None:
        out.append((start, len(mask) - start))
    return out


# ----------------------------------------------------------------- dump format


def dump_features(features: FeatureSequence, path: str | Path) -> None:
    T, D = features.frames.shape
    lines = [f"PHN-FEAT v1 {T} {D} {features.frame_rate!r}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in features.frames]
    Path(path).write_text("\n".join(lines) + "\n")


def read_features(path: str | Path) -> FeatureSequence:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 5 or head[:2] != ["PHN-FEAT", "v1"]:
        raise ValueError(f"{path}: not a PHN-FEAT v1 dump")
    T, D, rate = int(head[2]), int(head[3]), float(head[4])
    rows = [[float(v) for v in line.split()] for line in lines[1 : 1 + T]]
    frames = np.array(rows, dtype=np.float64).reshape(T, D)
    return FeatureSequence(frames, rate)

