"""Render token sequences as audio for desk-scale end-to-end runs.

Each token owns a pair of tones placed at mel-band centres; silence is
digital zero. A token sounds only in the first ``2 * hop - frame_len``
samples of its hop (240 of 320 at defaults, Hann-enveloped), so under
causal framing every analysis window sees exactly one token and quantizing
against :func:`palette_codebook` recovers the rendered ids exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .codec import Codebook
from .dsp import AudioBuffer, FrameSpec, causal_pad, extract_features, mel_to_hz, hz_to_mel


@dataclass(frozen=True)
class TokenPalette:
    vocab: int = 16
    silence_id: int = 0
    amplitude: float = 0.3
    spec: FrameSpec = FrameSpec()

    def band_centres(self) -> np.ndarray:
        edges = mel_to_hz(np.linspace(0.0, hz_to_mel(self.spec.sample_rate / 2), self.spec.n_mels + 2))
        return edges[1:-1]

    def tones(self, token: int) -> tuple[float, ...]:
        if token == self.silence_id:
            return ()
        centres = self.band_centres()
        rank = token if token < self.silence_id else token - 1
        lo = 3 + rank
        hi = lo + self.vocab + 2
        if hi >= len(centres):
            raise ValueError(f"palette of {self.vocab} tokens does not fit {self.spec.n_mels} mel bands")
        return float(centres[lo]), float(centres[hi])


def render_tokens(
    tokens: Sequence[int],
    palette: TokenPalette = TokenPalette(),
    tilt_db: float = 0.0,
    gain: float = 1.0,
) -> AudioBuffer:
    """One hop of audio per token.

    ``tilt_db`` applies a linear spectral tilt across 0..Nyquist (a crude
    per-speaker timbre); ``gain`` scales the whole utterance.
    """
    spec = palette.spec
    hop = spec.hop
    active = hop - (spec.frame_len - hop)
    if active <= 0:
        raise ValueError("renderer needs frame_len < 2 * hop")
    t = np.arange(active) / spec.sample_rate
    env = np.hanning(active)
    nyq = spec.sample_rate / 2
    cache: dict[int, np.ndarray] = {}
    out = np.zeros(len(tokens) * hop)
    for n, tok in enumerate(tokens):
        tok = int(tok)
        if tok not in cache:
            seg = np.zeros(hop)
            for f in palette.tones(tok):
                amp = palette.amplitude * 10 ** (tilt_db * (f / nyq - 0.5) / 20)
                seg[:active] += amp * np.sin(2 * np.pi * f * t)
            seg[:active] *= env
            cache[tok] = seg * gain
        out[n * hop : (n + 1) * hop] = cache[tok]
    return AudioBuffer(out, spec.sample_rate)


def palette_codebook(palette: TokenPalette = TokenPalette()) -> Codebook:
    """Centroid k = features of token k rendered in isolation (causal framing)."""
    rows = []
    for tok in range(palette.vocab):
        audio = render_tokens([tok], palette)
        rows.append(extract_features(causal_pad(audio, palette.spec), palette.spec).frames[0])
    return Codebook(np.array(rows), seed=0)
