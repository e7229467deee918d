"""``accentstream`` command line: codebook, golden, train, stream, eval, bench (plus synth).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .align import AlignmentError, build_golden_target, read_pair_manifest, silence_aware_align, write_golden_manifest
from .codec import Codebook, CodebookError, TokenSequence, kmeans_train, load_codebook, quantize, save_codebook
from .config import ConfigError, PipelineConfig
from .dsp import (
    AudioBuffer,
    EmptySequenceError,
    FeatureSequence,
    WavError,
    causal_pad,
    dump_features,
    energy_vad,
    extract_features,
    load_wav,
    read_features,
    write_wav,
)
from .evaluation import (
    ProbeError,
    UtteranceScore,
    accent_metrics,
    cosine,
    format_metrics,
    format_scores_csv,
    speaker_embedding,
    synthetic_probe,
)
from .nn.checkpoint import CheckpointError
from .nn.ctc import CTCInfeasibleError
from .nn.tensor import NonFiniteError
from .stream import ChunkConfig, LatencyReport, Pipeline, SamplerConfig, flush, open_session, push_chunk, push_partial
from .synth import TokenPalette, palette_codebook, render_tokens
from .train import (
    TrainingDivergedError,
    build_model,
    frame_accuracy,
    generate_synthetic_pair,
    heldout_pairs,
    load_training_checkpoint,
    train_loop,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

log = logging.getLogger("accentstream")


class DataError(Exception):
    pass


# ------------------------------------------------------------------- helpers


def _out_dir(cfg: PipelineConfig) -> Path:
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: PipelineConfig, out: Path) -> None:
    (out / "config.txt").write_text(cfg.to_text())


def _require(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"no {what} path given")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _codebook(cfg: PipelineConfig) -> Codebook:
    """The configured codebook, or the synthetic palette codebook when none is set."""
    if not cfg.paths.codebook:
        return palette_codebook(TokenPalette(vocab=cfg.translator.vocab, spec=cfg.frame))
    return load_codebook(_require(cfg.paths.codebook, "codebook"))


def _pipeline(cfg: PipelineConfig, allow_untrained: bool = False) -> Pipeline:
    if cfg.paths.checkpoint or not allow_untrained:
        model, _, _ = load_training_checkpoint(_require(cfg.paths.checkpoint, "checkpoint"))
    else:
        model = build_model(cfg.translator)
    return Pipeline(_codebook(cfg), model, cfg.frame)


def _features(path: str, cfg: PipelineConfig) -> FeatureSequence:
    if path.endswith(".wav"):
        return extract_features(causal_pad(load_wav(path, cfg.frame.sample_rate), cfg.frame), cfg.frame)
    return read_features(path)


def _read_int_tokens(path: str) -> np.ndarray:
    text = Path(path).read_text().replace(",", " ")
    return np.array([int(t) for t in text.split()], dtype=np.int64)


def _manifest_entries(path: Path) -> list[list[str]]:
    rows = []
    for line in path.read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            rows.append(line.split("\t"))
    return rows


# ------------------------------------------------------------------ commands


def cmd_synth(cfg: PipelineConfig, args) -> int:
    """Render synthetic L1/L2 pairs as WAVs with pair and codebook manifests."""
    out = _out_dir(cfg)
    wav_dir = out / "wav"
    wav_dir.mkdir(exist_ok=True)
    palette = TokenPalette(vocab=cfg.task.vocab, silence_id=cfg.task.silence_id, spec=cfg.frame)
    pair_lines, wav_lines, golden = [], [], []
    for i in range(args.count):
        rng = np.random.default_rng([cfg.seed, 7, i])
        pair = generate_synthetic_pair(cfg.task, args.frames, rng)
        tilt = float(rng.uniform(-6.0, 6.0))
        l1 = wav_dir / f"utt{i:04d}_l1.wav"
        l2 = wav_dir / f"utt{i:04d}_l2.wav"
        write_wav(l1, render_tokens(pair.native_tokens, palette, tilt_db=tilt))
        write_wav(l2, render_tokens(pair.l2_tokens, palette, tilt_db=tilt))
        pair_lines.append(f"utt{i:04d}\t{l1}\t{l2}")
        wav_lines += [f"utt{i:04d}_l1\t{l1}", f"utt{i:04d}_l2\t{l2}"]
        golden.append(pair.golden)
    (out / "pairs.tsv").write_text("".join(line + "\n" for line in pair_lines))
    (out / "wavs.tsv").write_text("".join(line + "\n" for line in wav_lines))
    (out / "l2.tsv").write_text("".join(f"utt{i:04d}\t{wav_dir / f'utt{i:04d}_l2.wav'}\n" for i in range(args.count)))
    write_golden_manifest(golden, out / "golden_reference.tsv")
    _echo_config(cfg, out)
    print(f"wrote {args.count} pairs to {out}")
    return EXIT_OK


def cmd_codebook(cfg: PipelineConfig, args) -> int:
    out = _out_dir(cfg)
    K = args.k or cfg.translator.vocab
    if args.palette:
        book = palette_codebook(TokenPalette(vocab=K, spec=cfg.frame))
    else:
        manifest = _require(args.manifest or "", "wav manifest")
        feats, failed = [], 0
        for row in _manifest_entries(manifest):
            try:
                feats.append(_features(row[-1], cfg))
            except (WavError, EmptySequenceError, OSError, ValueError) as exc:
                log.error("skipping %s: %s", row[-1], exc)
                failed += 1
        if failed:
            raise DataError(f"{failed} unreadable manifest entries")
        if not feats:
            raise DataError("manifest lists no audio")
        book = kmeans_train(feats, K, seed=cfg.seed)
    path = out / "codebook.txt"
    save_codebook(book, path)
    _echo_config(cfg, out)
    print(path)
    return EXIT_OK


def cmd_golden(cfg: PipelineConfig, args) -> int:
    out = _out_dir(cfg)
    manifest = _require(args.pairs or cfg.paths.pairs, "pair manifest")
    book = _codebook(cfg)
    try:
        pairs = read_pair_manifest(manifest)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    targets, skipped = [], 0
    for pair_id, l1_path, l2_path in pairs:
        try:
            f1, f2 = _features(l1_path, cfg), _features(l2_path, cfg)
            v1, v2 = energy_vad(f1, hangover_frames=args.hangover), energy_vad(f2, hangover_frames=args.hangover)
            aligned = silence_aware_align(f1, f2, v1, v2)
            targets.append(build_golden_target(aligned, v2, book, pair_id))
        except (WavError, EmptySequenceError, AlignmentError, CodebookError, OSError) as exc:
            log.error("skipping pair %s: %s", pair_id, exc)
            skipped += 1
    path = out / "golden.tsv"
    write_golden_manifest(targets, path)
    _echo_config(cfg, out)
    print(f"{path}: {len(targets)} targets, {skipped} skipped")
    return EXIT_DATA if skipped else EXIT_OK


def cmd_train(cfg: PipelineConfig, args) -> int:
    out = _out_dir(cfg)
    opt = cfg.optim
    if args.resume:
        model, state, _ = load_training_checkpoint(_require(args.resume, "resume checkpoint"))
        if model.cfg != cfg.translator:
            raise ConfigError("resume checkpoint was trained with a different translator config")
    else:
        model, state = build_model(cfg.translator), None
    ckpt = out / "translator.ckpt"
    loss_log = out / "loss.log"
    if state is None and loss_log.exists():
        loss_log.unlink()
    _echo_config(cfg, out)
    result = train_loop(
        model, cfg.task, opt, state=state, steps=args.steps, ckpt_path=ckpt, loss_log=loss_log, config_text=cfg.to_text()
    )
    acc = frame_accuracy(model, heldout_pairs(cfg.task, 32, opt.seq_len, cfg.seed))
    print(f"step = {result.state.step}\nheldout_frame_accuracy = {acc!r}\ncheckpoint = {ckpt}")
    return EXIT_OK


def cmd_stream(cfg: PipelineConfig, args) -> int:
    chunk = ChunkConfig(args.chunk_ms) if args.chunk_ms else cfg.chunk
    sampler = replace(cfg.sampler, greedy=True) if args.greedy else cfg.sampler
    pipe = _pipeline(cfg)
    out = _out_dir(cfg)
    _echo_config(replace(cfg, chunk=chunk, sampler=sampler), out)
    state = open_session(pipe, chunk, cfg.budget, sampler)
    if args.input:
        audio = load_wav(args.input, cfg.frame.sample_rate).samples
        source = (audio[i : i + chunk.samples] for i in range(0, len(audio), chunk.samples))
    else:
        source = _pcm_chunks(sys.stdin.buffer, chunk.samples)
    tokens, frames = [], []
    write = sys.stdout.write
    for block in source:
        if len(block) < chunk.samples:
            push_partial(state, block)
            break
        toks, feats = push_chunk(state, block)
        for t in toks.tokens:
            write(f"{t}\n")
        tokens.append(toks.tokens)
        frames.append(feats.frames)
    toks, feats, report = flush(state)
    for t in toks.tokens:
        write(f"{t}\n")
    tokens.append(toks.tokens)
    frames.append(feats.frames)
    write("report " + " ".join(line.replace(" = ", "=") for line in report.to_text().splitlines()) + "\n")
    all_tokens = np.concatenate(tokens).astype(np.int64)
    (out / "tokens.txt").write_text("".join(f"{t}\n" for t in all_tokens))
    dump_features(FeatureSequence(np.vstack(frames).reshape(-1, pipe.codebook.dim)), out / "features.txt")
    (out / "report.txt").write_text(report.to_text())
    return EXIT_OK


def _pcm_chunks(stream, n_samples: int):
    need = 2 * n_samples
    while True:
        raw = stream.read(need)
        while raw and len(raw) < need:
            more = stream.read(need - len(raw))
            if not more:
                break
            raw += more
        if not raw:
            return
        if len(raw) % 2:
            raise DataError("odd number of bytes in PCM16 input")
        yield np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
        if len(raw) < need:
            return


def cmd_eval(cfg: PipelineConfig, args) -> int:
    out = _out_dir(cfg)
    orig = _manifest_entries(_require(args.original, "original manifest"))
    conv = _manifest_entries(_require(args.converted, "converted manifest"))
    if len(orig) != len(conv):
        raise DataError(f"manifests differ in length: {len(orig)} vs {len(conv)}")
    book = _codebook(cfg)
    post_o, post_c, scores = [], [], []
    for ro, rc in zip(orig, conv):
        fo, fc = _features(ro[1], cfg), _features(rc[1], cfg)
        to = _read_int_tokens(ro[2]) if len(ro) > 2 else quantize(fo, book).tokens
        tc = _read_int_tokens(rc[2]) if len(rc) > 2 else quantize(fc, book).tokens
        po, pc = synthetic_probe(TokenSequence(to), cfg.task), synthetic_probe(TokenSequence(tc), cfg.task)
        post_o.append(po)
        post_c.append(pc)
        sim = cosine(speaker_embedding(fo), speaker_embedding(fc))
        scores.append(UtteranceScore(ro[0], float(po.probs[0]), float(pc.probs[0]), sim))
    metrics = accent_metrics(post_o, post_c)
    text = format_metrics(metrics, scores)
    (out / "metrics.txt").write_text(text)
    (out / "scores.csv").write_text(format_scores_csv(scores))
    _echo_config(cfg, out)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_bench(cfg: PipelineConfig, args) -> int:
    pipe = _pipeline(cfg, allow_untrained=True)
    out = _out_dir(cfg)
    frames = int(round(args.duration * 1000 / 20))
    pair = generate_synthetic_pair(cfg.task, max(frames, 4), np.random.default_rng([cfg.seed, 99]))
    audio = render_tokens(pair.l2_tokens, TokenPalette(vocab=cfg.task.vocab, silence_id=cfg.task.silence_id, spec=cfg.frame))
    blocks = []
    for chunk_ms in (80, 160):
        report = bench_once(pipe, audio, ChunkConfig(chunk_ms), cfg)
        blocks.append(report.to_text())
    text = "\n".join(blocks)
    (out / "bench.txt").write_text(text)
    _echo_config(cfg, out)
    sys.stdout.write(text)
    return EXIT_OK


def bench_once(pipe: Pipeline, audio: AudioBuffer, chunk: ChunkConfig, cfg: PipelineConfig) -> LatencyReport:
    state = open_session(pipe, chunk, cfg.budget, cfg.sampler)
    x = audio.samples
    whole = len(x) // chunk.samples
    for i in range(whole):
        push_chunk(state, x[i * chunk.samples : (i + 1) * chunk.samples])
    if len(x) % chunk.samples:
        push_partial(state, x[whole * chunk.samples :])
    return flush(state)[2]


def parse_bench(text: str) -> list[LatencyReport]:
    return [LatencyReport.from_text(block) for block in text.split("\n\n") if block.strip()]


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value pipeline config")
    common.add_argument("--seed", type=int, help="global seed (overrides every seeded component)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="accentstream", description="Streaming token-domain accent translation.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render synthetic L1/L2 pairs as WAV files")
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--frames", type=int, default=150)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("codebook", parents=[common], help="train a k-means codebook from WAVs")
    s.add_argument("--manifest", help="one WAV per line (last tab field)")
    s.add_argument("--k", type=int)
    s.add_argument("--palette", action="store_true", help="write the synthetic palette codebook instead")
    s.set_defaults(func=cmd_codebook)

    s = sub.add_parser("golden", parents=[common], help="build golden targets for L1/L2 pairs")
    s.add_argument("--pairs", help="pair manifest: id<TAB>l1.wav<TAB>l2.wav")
    s.add_argument("--hangover", type=int, default=2, help="VAD hangover frames")
    s.set_defaults(func=cmd_golden)

    s = sub.add_parser("train", parents=[common], help="train the translator on the synthetic task")
    s.add_argument("--steps", type=int, help="updates to run now (default: up to optim.max_steps)")
    s.add_argument("--resume", help="continue from a training checkpoint")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("stream", parents=[common], help="stream PCM16 from stdin through the pipeline")
    s.add_argument("--chunk-ms", type=int)
    s.add_argument("--greedy", action="store_true")
    s.add_argument("--input", help="read a WAV file instead of stdin")
    s.set_defaults(func=cmd_stream)

    s = sub.add_parser("eval", parents=[common], help="accent and speaker-similarity metrics")
    s.add_argument("--original", required=True, help="manifest: id<TAB>wav-or-features[<TAB>tokens]")
    s.add_argument("--converted", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common], help="latency and RTF at 80 and 160 ms chunks")
    s.add_argument("--duration", type=float, default=2.0, help="seconds of synthetic audio")
    s.set_defaults(func=cmd_bench)
    return p


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg = replace(cfg, paths=replace(cfg.paths, out=args.out))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        return args.func(cfg, args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergedError, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, WavError, EmptySequenceError, AlignmentError, CodebookError, ProbeError, CTCInfeasibleError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
