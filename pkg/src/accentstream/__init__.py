"""Streaming token-domain accent translation at desk scale."""

from .codec import Codebook, TokenSequence, decode_tokens, kmeans_train, quantize
from .dsp import AudioBuffer, FeatureSequence, FrameSpec, energy_vad, extract_features, load_wav
from .stream import ChunkConfig, LookaheadBudget, Pipeline, SamplerConfig, flush, open_session, push_chunk
from .translator import TranslatorConfig, TranslatorModel

__version__ = "0.1.0"
