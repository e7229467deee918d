"""Chunked streaming runtime: audio chunks in, translated tokens and decoded frames out.

Three stages run frame-synchronously at 50 Hz:

    encoder   log-mel + nearest-centroid quantization
    translator token-to-token model over a bounded history window
    decoder   centroid lookup with a centred moving average

Each stage holds a frame back until its own lookahead is available, so
frame t leaves the pipeline once frame ``t + lookahead_frames`` has been
ingested. With greedy sampling the concatenated output equals
:func:`offline_translate` on the same audio, whatever the chunk size.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .codec import Codebook, TokenSequence, decode_tokens, quantize
from .dsp import AudioBuffer, FeatureSequence, FrameSpec, causal_pad, extract_features, frame_features
from .translator import TranslatorModel

FRAME_MS = 20


class StreamError(RuntimeError):
    pass


@dataclass(frozen=True)
class ChunkConfig:
    chunk_ms: int = 80
    sample_rate: int = 16000
    hop_ms: int = FRAME_MS

    def __post_init__(self) -> None:
        if self.chunk_ms <= 0 or self.chunk_ms % self.hop_ms:
            raise ValueError(f"chunk of {self.chunk_ms} ms is not a positive multiple of the {self.hop_ms} ms hop")

    @classmethod
    def cpu(cls) -> "ChunkConfig":
        return cls(chunk_ms=160)

    @property
    def frames(self) -> int:
        return self.chunk_ms // self.hop_ms

    @property
    def samples(self) -> int:
        return self.chunk_ms * self.sample_rate // 1000


@dataclass(frozen=True)
class LookaheadBudget:
    encoder_ms: int = 40
    translator_ms: int = 40
    decoder_ms: int = 40

    def __post_init__(self) -> None:
        for v in (self.encoder_ms, self.translator_ms, self.decoder_ms):
            if v < 0 or v % FRAME_MS:
                raise ValueError("lookahead must be a non-negative multiple of 20 ms")

    @property
    def total_ms(self) -> int:
        return self.encoder_ms + self.translator_ms + self.decoder_ms

    @property
    def frames(self) -> tuple[int, int, int]:
        return self.encoder_ms // FRAME_MS, self.translator_ms // FRAME_MS, self.decoder_ms // FRAME_MS

    @property
    def total_frames(self) -> int:
        return self.total_ms // FRAME_MS


@dataclass(frozen=True)
class SamplerConfig:
    k: int = 10
    temperature: float = 0.7
    seed: int = 0
    greedy: bool = False

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")


@dataclass
class Pipeline:
    """Frozen models shared by any number of sessions."""

    codebook: Codebook
    model: TranslatorModel
    spec: FrameSpec = FrameSpec()
    history_frames: int = 100

    def __post_init__(self) -> None:
        if self.codebook.K != self.model.cfg.vocab:
            raise ValueError(f"codebook has {self.codebook.K} tokens, translator expects {self.model.cfg.vocab}")
        if self.codebook.dim != self.spec.n_mels:
            raise ValueError("codebook dimension does not match the feature spec")

    @property
    def context_frames(self) -> int:
        """Token history kept for the translator (covers its full receptive field)."""
        return max(self.history_frames, self.model.cfg.receptive_past)


# ------------------------------------------------------------------ sampling


def sample_topk(logits: np.ndarray, sampler: SamplerConfig, rng: np.random.Generator, blank: int | None = None) -> int:
    """Top-k / temperature sampling over one logits row.

    ``blank`` (if given) can never be emitted. Ties at the k-th place keep
    the lower ids. Exactly one ``rng.random()`` draw is consumed per call
    unless the choice is forced (greedy or a single candidate).
    """
    row = np.asarray(logits, dtype=np.float64).copy()
    if blank is not None:
        row[blank] = -np.inf
    if sampler.greedy:
        return int(np.argmax(row))
    order = np.argsort(-row, kind="stable")
    n_valid = int(np.isfinite(row).sum())
    keep = order[: max(1, min(sampler.k, n_valid))]
    if len(keep) == 1:
        return int(keep[0])
    z = row[keep] / sampler.temperature
    p = np.exp(z - z.max())
    cdf = np.cumsum(p / p.sum())
    u = rng.random()
    return int(keep[min(int(np.searchsorted(cdf, u, side="right")), len(keep) - 1)])


# ------------------------------------------------------------------- reports


@dataclass(frozen=True)
class LatencyReport:
    chunk_ms: int
    lookahead_ms: int
    chunks: int
    audio_s: float
    mean_compute_ms: float
    max_compute_ms: float
    total_compute_ms: float
    zero_audio: bool = False

    @property
    def algorithmic_ms(self) -> int:
        return self.chunk_ms + self.lookahead_ms

    @property
    def end_to_end_ms(self) -> float:
        return self.algorithmic_ms + self.max_compute_ms

    @property
    def rtf(self) -> float:
        """Compute time over audio time; 0 when no audio was pushed (see ``zero_audio``)."""
        if self.zero_audio:
            return 0.0
        return self.total_compute_ms / 1000.0 / self.audio_s

    def to_text(self) -> str:
        items = {f.name: getattr(self, f.name) for f in fields(self)}
        items.update(algorithmic_ms=self.algorithmic_ms, end_to_end_ms=self.end_to_end_ms, rtf=self.rtf)
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in items.items())

    @classmethod
    def from_text(cls, text: str) -> "LatencyReport":
        kv = parse_key_values(text)
        kinds = {f.name: f.type for f in fields(cls)}
        missing = set(kinds) - set(kv)
        if missing:
            raise ValueError(f"latency report lacks {sorted(missing)}")
        args = {}
        for name in kinds:
            raw = kv[name]
            if name == "zero_audio":
                args[name] = raw == "true"
            elif name in ("chunk_ms", "lookahead_ms", "chunks"):
                args[name] = int(raw)
            else:
                args[name] = float(raw)
        return cls(**args)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"not a key = value line: {line!r}")
        out[key.strip()] = value.strip()
    return out


# ------------------------------------------------------------------- session


@dataclass
class StreamState:
    pipeline: Pipeline
    chunk: ChunkConfig
    budget: LookaheadBudget
    sampler: SamplerConfig
    rng: np.random.Generator
    samples: np.ndarray  # un-framed tail of the input (includes the causal left pad)
    tokens_in: list = field(default_factory=list)  # encoder output, bounded history
    tokens_out: list = field(default_factory=list)  # translator output, bounded history
    base_in: int = 0  # absolute index of tokens_in[0]
    base_out: int = 0
    frames_ingested: int = 0
    encoded: int = 0
    translated: int = 0
    frames_emitted: int = 0
    samples_pushed: int = 0
    chunk_times: list = field(default_factory=list)
    flush_time: float = 0.0
    final_pushed: bool = False
    closed: bool = False

    @property
    def frames_pending(self) -> int:
        return self.frames_ingested - self.frames_emitted

    @property
    def pending_capacity(self) -> int:
        return self.budget.total_frames + self.chunk.frames


def open_session(
    pipeline: Pipeline,
    chunk: ChunkConfig = ChunkConfig(),
    budget: LookaheadBudget = LookaheadBudget(),
    sampler: SamplerConfig = SamplerConfig(),
) -> StreamState:
    spec = pipeline.spec
    if chunk.sample_rate != spec.sample_rate or chunk.hop_ms * spec.sample_rate != 1000 * spec.hop:
        raise ValueError("chunk config disagrees with the feature frame spec")
    if budget.translator_ms != pipeline.model.cfg.future_ms:
        raise ValueError(
            f"translator lookahead budget {budget.translator_ms} ms != model future context {pipeline.model.cfg.future_ms} ms"
        )
    return StreamState(
        pipeline=pipeline,
        chunk=chunk,
        budget=budget,
        sampler=sampler,
        rng=np.random.default_rng(sampler.seed),
        samples=np.zeros(spec.frame_len - spec.hop),
    )


def push_chunk(state: StreamState, audio) -> tuple[TokenSequence, FeatureSequence]:
    """Ingest exactly one chunk; return whatever frames became final."""
    if state.closed:
        raise StreamError("push after flush")
    x = np.asarray(audio.samples if isinstance(audio, AudioBuffer) else audio, dtype=np.float64)
    if state.final_pushed:
        raise StreamError("push after the partial final chunk")
    if x.ndim != 1 or len(x) != state.chunk.samples:
        raise StreamError(f"chunk must hold {state.chunk.samples} samples, got {x.shape}")
    t0 = time.perf_counter()
    _ingest(state, x)
    out = _advance(state, final=False)
    state.chunk_times.append(time.perf_counter() - t0)
    return out


def push_partial(state: StreamState, audio) -> None:
    """Hand over a final chunk shorter than ``chunk_ms``; its frames come out of :func:`flush`."""
    if state.closed:
        raise StreamError("push after flush")
    x = np.asarray(audio.samples if isinstance(audio, AudioBuffer) else audio, dtype=np.float64)
    if x.ndim != 1 or len(x) >= state.chunk.samples:
        raise StreamError("a partial chunk must be shorter than one chunk")
    _ingest(state, x)
    state.final_pushed = True


def flush(state: StreamState) -> tuple[TokenSequence, FeatureSequence, LatencyReport]:
    """Zero-pad any partial hop, drain every pending frame and close the session.

    At the true end of the stream no further context will ever arrive, so
    the last frames are produced with their future context clipped, which
    is exactly what the offline pipeline sees at the end of an utterance.
    """
    if state.closed:
        raise StreamError("session already flushed")
    t0 = time.perf_counter()
    spec = state.pipeline.spec
    tail = (len(state.samples) - (spec.frame_len - spec.hop)) % spec.hop
    if tail:
        _ingest(state, np.zeros(spec.hop - tail), count=False)
    out = _advance(state, final=True)
    state.flush_time = time.perf_counter() - t0
    state.closed = True
    assert state.frames_emitted == state.frames_ingested
    return out[0], out[1], _report(state)


def _ingest(state: StreamState, x: np.ndarray, count: bool = True) -> None:
    spec = state.pipeline.spec
    if count:
        state.samples_pushed += len(x)
    buf = np.concatenate([state.samples, x])
    n = spec.num_frames(len(buf))
    if n:
        idx = np.arange(spec.frame_len)[None, :] + spec.hop * np.arange(n)[:, None]
        feats = frame_features(buf[idx], spec)
        state.tokens_in.extend(int(t) for t in quantize(FeatureSequence(feats, spec.frame_rate), state.pipeline.codebook).tokens)
        buf = buf[n * spec.hop :]
        state.frames_ingested += n
    state.samples = buf


def _advance(state: StreamState, final: bool) -> tuple[TokenSequence, FeatureSequence]:
    pipe = state.pipeline
    enc_la, tr_la, dec_la = state.budget.frames
    n = state.frames_ingested
    if final:
        enc_ready = tr_ready = dec_ready = n
    else:
        enc_ready = max(0, n - enc_la)
        tr_ready = max(0, enc_ready - tr_la)
        dec_ready = max(0, tr_ready - dec_la)
    state.encoded = max(state.encoded, enc_ready)

    if tr_ready > state.translated:
        start = max(state.base_in, state.translated - pipe.model.cfg.receptive_past)
        stop = state.encoded if final else min(state.encoded, tr_ready + tr_la)
        window = np.array(state.tokens_in[start - state.base_in : stop - state.base_in], dtype=np.int64)
        logits = pipe.model.forward(window).data
        blank = pipe.model.cfg.blank
        for t in range(state.translated, tr_ready):
            state.tokens_out.append(sample_topk(logits[t - start], state.sampler, state.rng, blank))
        state.translated = tr_ready

    emitted = np.zeros(0, dtype=np.int64)
    frames = np.zeros((0, pipe.codebook.dim))
    if dec_ready > state.frames_emitted:
        lo, hi = state.frames_emitted, dec_ready
        emitted = np.array(state.tokens_out[lo - state.base_out : hi - state.base_out], dtype=np.int64)
        frames = _decode_span(state, lo, hi, dec_la)
        state.frames_emitted = hi
    _trim(state)
    return TokenSequence(emitted), FeatureSequence(frames, pipe.spec.frame_rate)


def _decode_span(state: StreamState, lo: int, hi: int, half: int) -> np.ndarray:
    cents = state.pipeline.codebook.centroids
    toks = state.tokens_out
    rows = []
    for t in range(lo, hi):
        a = max(0, t - half)
        b = min(state.translated, t + half + 1)
        ids = toks[a - state.base_out : b - state.base_out]
        rows.append(cents[ids].mean(axis=0))
    return np.array(rows).reshape(hi - lo, cents.shape[1])


def _trim(state: StreamState) -> None:
    keep = state.pipeline.context_frames
    cut = state.translated - keep - 1
    if cut > state.base_in:
        del state.tokens_in[: cut - state.base_in]
        state.base_in = cut
    half = state.budget.frames[2]
    cut = state.frames_emitted - half - 1
    if cut > state.base_out:
        del state.tokens_out[: cut - state.base_out]
        state.base_out = cut


def _report(state: StreamState) -> LatencyReport:
    times_ms = [1000.0 * t for t in state.chunk_times]
    zero = state.samples_pushed == 0
    return LatencyReport(
        chunk_ms=state.chunk.chunk_ms,
        lookahead_ms=state.budget.total_ms,
        chunks=len(times_ms),
        audio_s=state.samples_pushed / state.chunk.sample_rate,
        mean_compute_ms=float(np.mean(times_ms)) if times_ms else 0.0,
        max_compute_ms=max(times_ms) if times_ms else 0.0,
        total_compute_ms=sum(times_ms) + 1000.0 * state.flush_time,
        zero_audio=zero,
    )


# ------------------------------------------------------------------- drivers


def stream_audio(
    pipeline: Pipeline,
    audio: AudioBuffer,
    chunk: ChunkConfig = ChunkConfig(),
    budget: LookaheadBudget = LookaheadBudget(),
    sampler: SamplerConfig = SamplerConfig(),
) -> tuple[TokenSequence, FeatureSequence, LatencyReport]:
    """Feed ``audio`` chunk by chunk (the ragged tail goes through flush)."""
    state = open_session(pipeline, chunk, budget, sampler)
    toks, feats = [], []
    x = audio.samples
    size = chunk.samples
    whole = len(x) // size
    for i in range(whole):
        t, f = push_chunk(state, x[i * size : (i + 1) * size])
        toks.append(t.tokens)
        feats.append(f.frames)
    tail = x[whole * size :]
    if len(tail):
        push_partial(state, tail)
    t, f, report = flush(state)
    toks.append(t.tokens)
    feats.append(f.frames)
    return (
        TokenSequence(np.concatenate(toks).astype(np.int64)),
        FeatureSequence(np.vstack(feats), pipeline.spec.frame_rate),
        report,
    )


def offline_translate(
    pipeline: Pipeline,
    audio: AudioBuffer,
    budget: LookaheadBudget = LookaheadBudget(),
    sampler: SamplerConfig = SamplerConfig(),
) -> tuple[TokenSequence, FeatureSequence]:
    """Whole-utterance reference: same framing, full-sequence forward pass."""
    spec = pipeline.spec
    x = audio.samples
    if len(x) % spec.hop:
        x = np.concatenate([x, np.zeros(spec.hop - len(x) % spec.hop)])
    if len(x) == 0:
        return TokenSequence(np.zeros(0, dtype=np.int64)), FeatureSequence(np.zeros((0, spec.n_mels)))
    feats = extract_features(causal_pad(AudioBuffer(x, audio.sample_rate), spec), spec)
    l2 = quantize(feats, pipeline.codebook)
    logits = pipeline.model.forward(l2.tokens).data
    rng = np.random.default_rng(sampler.seed)
    blank = pipeline.model.cfg.blank
    out = np.array([sample_topk(row, sampler, rng, blank) for row in logits], dtype=np.int64)
    width = 2 * budget.frames[2] + 1
    return TokenSequence(out), decode_tokens(out, pipeline.codebook, width)


def pending_capacity(chunk: ChunkConfig = ChunkConfig(), budget: LookaheadBudget = LookaheadBudget()) -> int:
    return math.ceil((chunk.chunk_ms + budget.total_ms) / FRAME_MS)
