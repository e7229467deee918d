import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from accentstream.codec import (
    Codebook,
    CodebookError,
    TokenSequence,
    decode_tokens,
    dedup,
    kmeans_train,
    load_codebook,
    parse_tokens,
    quantize,
    read_token_file,
    save_codebook,
    write_token_file,
)
from accentstream.dsp import causal_pad, extract_features
from accentstream.synth import render_tokens

token_lists = st.lists(st.integers(0, 5), max_size=40)


def _book(rng, K=6, D=3):
    return Codebook(rng.normal(size=(K, D)), seed=0)


# ---------------------------------------------------------------- kmeans


def test_blobs_recovered(rng):
    means = np.array([[0, 0], [5, 5], [-5, 5], [5, -5], [10, 0]], dtype=float)
    x = np.concatenate([m + 0.01 * rng.normal(size=(60, 2)) for m in means])
    book = kmeans_train(x, 5, seed=3)
    for m in means:
        assert np.min(np.linalg.norm(book.centroids - m, axis=1)) < 0.1


def test_exact_cover_has_zero_inertia(rng):
    pts = rng.normal(size=(6, 4))
    x = np.concatenate([pts, pts, pts])
    book = kmeans_train(x, 6, seed=0)
    order = np.lexsort(book.centroids.T)
    assert np.allclose(book.centroids[order], pts[np.lexsort(pts.T)], atol=1e-12)
    assert book.inertia_history[-1] < 1e-24


def test_same_seed_is_bit_identical(rng):
    x = rng.normal(size=(200, 5))
    a = kmeans_train(x, 8, seed=11)
    b = kmeans_train(x, 8, seed=11)
    assert np.array_equal(a.centroids, b.centroids)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), K=st.integers(2, 8))
def test_inertia_never_increases(seed, K):
    x = np.random.default_rng(seed).normal(size=(60, 3))
    hist = kmeans_train(x, K, seed=seed).inertia_history
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


def test_too_few_rows(rng):
    with pytest.raises(CodebookError):
        kmeans_train(rng.normal(size=(3, 2)), 4)


def test_codebook_invariants():
    with pytest.raises(CodebookError):
        Codebook(np.zeros((1, 3)))
    with pytest.raises(CodebookError):
        Codebook(np.array([[1.0, 2.0], [1.0, 2.0]]))
    with pytest.raises(CodebookError):
        Codebook(np.array([[1.0, np.inf], [0.0, 0.0]]))


# -------------------------------------------------------------- quantize


def test_centroid_quantizes_to_itself(rng):
    book = _book(rng)
    assert quantize(book.centroids[5:6], book).tokens.tolist() == [5]


def test_tie_goes_to_smaller_id():
    cents = np.zeros((8, 2))
    cents[:, 0] = np.arange(8) * 10.0
    cents[2] = [-1.0, 0.0]
    cents[7] = [1.0, 0.0]
    book = Codebook(cents)
    assert quantize(np.array([[0.0, 0.0]]), book).tokens.tolist() == [0]
    cents[0] = [50.0, 50.0]
    book = Codebook(cents)
    assert quantize(np.array([[0.0, 0.0]]), book).tokens.tolist() == [2]


def test_quantize_matches_exhaustive_scan(rng):
    book = _book(rng, K=9, D=4)
    x = rng.normal(size=(300, 4))
    want = []
    for row in x:
        best, best_d = 0, np.inf
        for k, c in enumerate(book.centroids):
            d = float(np.sum((row - c) ** 2))
            if d < best_d:
                best, best_d = k, d
        want.append(best)
    assert quantize(x, book).tokens.tolist() == want


def test_quantize_dimension_mismatch(rng):
    with pytest.raises(CodebookError):
        quantize(np.zeros((2, 5)), _book(rng))


# ---------------------------------------------------------------- decode


def test_decode_lookup(rng):
    book = _book(rng)
    out = decode_tokens([0, 0, 1], book).frames
    assert np.array_equal(out, book.centroids[[0, 0, 1]])


def test_decode_smoothing_middle_frame(rng):
    book = _book(rng)
    c0, c1 = book.centroids[0], book.centroids[1]
    out = decode_tokens([0, 0, 1], book, width=3).frames
    assert np.allclose(out[1], (c0 + c0 + c1) / 3, atol=1e-12)
    assert np.allclose(out[0], (c0 + c0) / 2, atol=1e-12)  # window truncated at the edge


@settings(max_examples=40, deadline=None)
@given(tokens=token_lists, width=st.sampled_from([1, 3, 5, 7]))
def test_smoothing_matches_window_means(tokens, width):
    book = _book(np.random.default_rng(0))
    out = decode_tokens(tokens, book, width).frames
    half = width // 2
    for t in range(len(tokens)):
        ids = tokens[max(0, t - half) : t + half + 1]
        assert np.allclose(out[t], book.centroids[ids].mean(axis=0), atol=1e-12)


@given(token_lists)
def test_quantize_decode_round_trip(tokens):
    book = _book(np.random.default_rng(1))
    assert quantize(decode_tokens(tokens, book), book).tokens.tolist() == tokens


def test_decode_rejects_out_of_range(rng):
    with pytest.raises(CodebookError):
        decode_tokens([0, 6], _book(rng))


def test_even_width_rejected(rng):
    with pytest.raises(ValueError):
        decode_tokens([0, 1], _book(rng), width=2)


# ----------------------------------------------------------------- dedup


def test_dedup_examples():
    assert dedup([3, 3, 5, 5, 5, 3]).tolist() == [3, 5, 3]
    assert dedup([]).tolist() == []


@given(token_lists)
def test_dedup_run_length_oracle(tokens):
    out = dedup(tokens).tolist()
    assert all(a != b for a, b in zip(out, out[1:]))
    assert dedup(out).tolist() == out
    # each output element is one maximal run of the input, in order
    runs = []
    for t in tokens:
        if not runs or runs[-1] != t:
            runs.append(t)
    assert out == runs


# ------------------------------------------------------------------- files


def test_codebook_file_round_trip(tmp_path, rng):
    book = Codebook(rng.normal(size=(5, 3)), seed=42)
    p = tmp_path / "cb.txt"
    save_codebook(book, p)
    assert p.read_text().splitlines()[0] == "PHN-CB v1 5 3 42"
    back = load_codebook(p)
    assert np.array_equal(back.centroids, book.centroids) and back.seed == 42


def test_bad_codebook_header(tmp_path):
    p = tmp_path / "cb.txt"
    p.write_text("PHN-XX v1 2 2 0\n0 0\n1 1\n")
    with pytest.raises(CodebookError):
        load_codebook(p)


def test_token_file_round_trip(tmp_path):
    seqs = [[1, 2, 3], [], [7]]
    p = tmp_path / "tok.txt"
    write_token_file(seqs, p)
    assert p.read_text() == "1,2,3\n\n7\n"
    assert [s.tolist() for s in read_token_file(p)] == seqs
    assert parse_tokens(" 4,5 ").tolist() == [4, 5]


def test_token_sequence_range_check():
    with pytest.raises(CodebookError):
        TokenSequence([0, 3]).check(3)


def test_palette_codebook_recovers_rendered_ids(palette, palette_book, rng):
    tokens = rng.integers(0, palette.vocab, size=120)
    feats = extract_features(causal_pad(render_tokens(tokens, palette, tilt_db=4.0, gain=0.7)))
    assert np.array_equal(quantize(feats, palette_book).tokens, tokens)
