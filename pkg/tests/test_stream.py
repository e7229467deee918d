import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from accentstream.dsp import AudioBuffer
from accentstream.stream import (
    ChunkConfig,
    LatencyReport,
    LookaheadBudget,
    Pipeline,
    SamplerConfig,
    StreamError,
    flush,
    offline_translate,
    open_session,
    pending_capacity,
    push_chunk,
    push_partial,
    sample_topk,
    stream_audio,
)
from accentstream.synth import render_tokens
from accentstream.translator import TranslatorConfig, TranslatorModel

GREEDY = SamplerConfig(greedy=True)


@pytest.fixture(scope="module")
def pipe(palette_book):
    return Pipeline(palette_book, TranslatorModel(TranslatorConfig(seed=3)))


def _audio(palette, rng, frames):
    return render_tokens(rng.integers(0, palette.vocab, size=frames), palette)


# ------------------------------------------------------------------ configs


def test_default_pending_capacity():
    assert pending_capacity() == 10
    assert LookaheadBudget().total_ms == 120 and LookaheadBudget().total_frames == 6


@pytest.mark.parametrize("ms", [50, 0, -20, 30])
def test_chunk_must_be_whole_hops(ms):
    with pytest.raises(ValueError):
        ChunkConfig(chunk_ms=ms)


def test_sampler_validation():
    with pytest.raises(ValueError):
        SamplerConfig(k=0)
    with pytest.raises(ValueError):
        SamplerConfig(temperature=0.0)


def test_budget_must_match_model(pipe):
    with pytest.raises(ValueError):
        open_session(pipe, budget=LookaheadBudget(translator_ms=60))


# --------------------------------------------------------------- emission


def test_first_chunk_emits_nothing_then_formula(pipe, palette, rng):
    state = open_session(pipe, sampler=GREEDY)
    audio = _audio(palette, rng, 40).samples
    size = state.chunk.samples
    toks, feats = push_chunk(state, audio[:size])
    assert len(toks) == 0 and len(feats) == 0 and state.frames_pending == 4
    total = 0
    for i in range(1, 10):
        toks, feats = push_chunk(state, audio[i * size : (i + 1) * size])
        total += len(toks)
        assert len(feats) == len(toks)
        ingested = 4 * (i + 1)
        assert state.frames_emitted == total == max(0, ingested - 6)
        assert state.frames_pending <= state.pending_capacity
    # 200 ms ingested in 40 ms chunks: 10 frames in, 4 out
    state2 = open_session(pipe, ChunkConfig(chunk_ms=40), sampler=GREEDY)
    size = state2.chunk.samples
    out = sum(len(push_chunk(state2, audio[i * size : (i + 1) * size])[0]) for i in range(5))
    assert state2.frames_ingested == 10 and out == 4


@settings(max_examples=12, deadline=None)
@given(n_samples=st.integers(0, 9000), chunk_ms=st.sampled_from([20, 80, 160]))
def test_frames_out_equal_frames_in(palette_book, n_samples, chunk_ms):
    pipe = Pipeline(palette_book, TranslatorModel(TranslatorConfig(seed=3)))
    x = AudioBuffer(np.random.default_rng(n_samples).uniform(-0.3, 0.3, n_samples))
    toks, feats, report = stream_audio(pipe, x, ChunkConfig(chunk_ms=chunk_ms), sampler=GREEDY)
    assert len(toks) == len(feats) == math.ceil(n_samples / 320)
    assert report.zero_audio == (n_samples == 0)


def test_greedy_stream_equals_offline(pipe, palette, rng):
    audio = _audio(palette, rng, 173)
    off_t, off_f = offline_translate(pipe, audio, sampler=GREEDY)
    for ms in (20, 80, 160, 400):
        t, f, _ = stream_audio(pipe, audio, ChunkConfig(chunk_ms=ms), sampler=GREEDY)
        assert np.array_equal(t.tokens, off_t.tokens)
        assert np.allclose(f.frames, off_f.frames, atol=1e-12)


def test_sampled_stream_equals_offline_with_same_seed(pipe, palette, rng):
    audio = _audio(palette, rng, 90)
    sampler = SamplerConfig(seed=42)
    off, _ = offline_translate(pipe, audio, sampler=sampler)
    for ms in (80, 160):
        got, _, _ = stream_audio(pipe, audio, ChunkConfig(chunk_ms=ms), sampler=sampler)
        assert np.array_equal(got.tokens, off.tokens)
    other, _ = offline_translate(pipe, audio, sampler=SamplerConfig(seed=43))
    assert not np.array_equal(other.tokens, off.tokens)


def test_two_sessions_behave_alike(pipe, palette, rng):
    audio = _audio(palette, rng, 60).samples
    a, b = open_session(pipe), open_session(pipe)
    size = a.chunk.samples
    for i in range(len(audio) // size):
        ta, fa = push_chunk(a, audio[i * size : (i + 1) * size])
        tb, fb = push_chunk(b, audio[i * size : (i + 1) * size])
        assert np.array_equal(ta.tokens, tb.tokens) and np.array_equal(fa.frames, fb.frames)
    assert np.array_equal(flush(a)[0].tokens, flush(b)[0].tokens)


def test_history_stays_bounded(pipe, palette, rng):
    state = open_session(pipe, sampler=GREEDY)
    audio = _audio(palette, rng, 800).samples
    size = state.chunk.samples
    for i in range(len(audio) // size):
        push_chunk(state, audio[i * size : (i + 1) * size])
        assert len(state.tokens_in) <= pipe.context_frames + 12
        assert len(state.tokens_out) <= 12


# ------------------------------------------------------------ session errors


def test_session_errors(pipe):
    state = open_session(pipe)
    with pytest.raises(StreamError):
        push_chunk(state, np.zeros(100))
    push_partial(state, np.zeros(100))
    with pytest.raises(StreamError):
        push_chunk(state, np.zeros(state.chunk.samples))
    flush(state)
    with pytest.raises(StreamError):
        push_chunk(state, np.zeros(state.chunk.samples))
    with pytest.raises(StreamError):
        flush(state)


def test_flush_right_after_open(pipe):
    toks, feats, report = flush(open_session(pipe))
    assert len(toks) == 0 and len(feats) == 0
    assert report.zero_audio and report.rtf == 0.0 and report.chunks == 0


def test_report_for_one_second(pipe, palette, rng):
    _, _, report = stream_audio(pipe, _audio(palette, rng, 50), sampler=GREEDY)
    assert report.chunks == 12 and report.audio_s == 1.0
    assert report.algorithmic_ms == 200
    assert report.end_to_end_ms == 200 + report.max_compute_ms
    assert report.end_to_end_ms >= report.algorithmic_ms and report.rtf > 0
    assert report.max_compute_ms >= report.mean_compute_ms


def test_report_round_trip():
    rep = LatencyReport(160, 120, 7, 1.12, 3.25, 5.5, 30.125)
    text = rep.to_text()
    assert "algorithmic_ms = 280\n" in text
    assert LatencyReport.from_text(text) == rep
    with pytest.raises(ValueError):
        LatencyReport.from_text("chunk_ms = 80\n")


# ---------------------------------------------------------------- sampling


def test_greedy_and_k1_take_argmax(rng):
    row = np.array([0.1, 2.0, 1.9, -1.0, 5.0])
    assert sample_topk(row, SamplerConfig(greedy=True), rng) == 4
    assert sample_topk(row, SamplerConfig(greedy=True), rng, blank=4) == 1
    for temp in (0.01, 1.0, 100.0):
        assert sample_topk(row, SamplerConfig(k=1, temperature=temp), rng) == 4


def test_ties_keep_lower_ids():
    row = np.array([1.0, 3.0, 3.0, 3.0])
    draws = {sample_topk(row, SamplerConfig(k=2), np.random.default_rng(s)) for s in range(200)}
    assert draws == {1, 2}


def test_blank_never_sampled():
    row = np.array([0.0, 0.0, 50.0])
    for s in range(100):
        assert sample_topk(row, SamplerConfig(k=3), np.random.default_rng(s), blank=2) in (0, 1)


def test_topk_frequencies_within_three_sigma():
    logits = np.array([2.0, 1.0, 0.5, 0.4, -3.0])
    sampler = SamplerConfig(k=3, temperature=0.7)
    rng = np.random.default_rng(99)
    n = 100_000
    counts = np.bincount([sample_topk(logits, sampler, rng) for _ in range(n)], minlength=5)
    z = logits[:3] / 0.7
    p = np.exp(z - z.max())
    p /= p.sum()
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts[:3] - n * p) <= 3 * sigma)
    assert counts[3:].sum() == 0
