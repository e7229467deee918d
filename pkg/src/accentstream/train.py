"""Stage II training: synthetic accent pairs, AdamW with exponential decay, checkpoints."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .align import GoldenTarget
from .codec import dedup
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.tensor import NonFiniteError, Tensor
from .translator import LossWeights, TranslatorConfig, TranslatorModel, joint_loss, predict

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, seeds: Sequence[tuple[int, ...]], detail: str = ""):
        self.step = step
        self.seeds = list(seeds)
        super().__init__(f"non-finite loss at step {step} (example seeds {self.seeds[:4]}...) {detail}".strip())


@dataclass(frozen=True)
class OptimizerConfig:
    lr0: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    gamma: float = 0.999996
    batch: int = 8
    max_steps: int = 3000
    seq_len: int = 64
    seed: int = 0
    ckpt_every: int = 1000
    lambda_ce: float = 1.0
    lambda_ctc: float = 1.0
    label_smoothing: float = 0.0

    def __post_init__(self) -> None:
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.batch < 1 or self.seq_len < 4:
            raise ValueError("batch >= 1 and seq_len >= 4 required")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_ce, self.lambda_ctc)


def lr_at(opt: OptimizerConfig, step: int) -> float:
    """Learning rate used by update number ``step`` (0-based): lr0 * gamma**step."""
    return opt.lr0 * opt.gamma**step


# ----------------------------------------------------------- synthetic pairs


@dataclass(frozen=True)
class SyntheticAccentTask:
    """Token-domain stand-in for native / accented utterance pairs.

    Native sequences are runs of 2-6 frames over the "native" ids (every id
    that is neither silence nor a substitution target). The accented side
    swaps ids through ``substitutions`` and jitters run lengths by one
    frame; the golden side keeps native ids at the accented timing.
    """

    vocab: int = 16
    substitutions: Mapping[int, int] = field(default_factory=lambda: {1: 12, 2: 13, 3: 14, 4: 15})
    sub_prob: float = 1.0
    jitter_prob: float = 0.2
    silence_id: int = 0
    silence_prob: float = 0.15
    min_run: int = 2
    max_run: int = 6
    seed: int = 0

    def __post_init__(self) -> None:
        subs = dict(self.substitutions)
        object.__setattr__(self, "substitutions", subs)
        for a, b in subs.items():
            if not (0 <= a < self.vocab and 0 <= b < self.vocab):
                raise ValueError(f"substitution {a}->{b} outside [0, {self.vocab})")
        for p in (self.sub_prob, self.jitter_prob, self.silence_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.silence_id in subs or self.silence_id in subs.values():
            raise ValueError("silence id cannot take part in substitutions")
        if not self.native_ids:
            raise ValueError("task leaves no native ids")

    @property
    def accent_ids(self) -> frozenset[int]:
        return frozenset(self.substitutions.values()) - set(self.substitutions)

    @property
    def native_ids(self) -> tuple[int, ...]:
        banned = {self.silence_id} | set(self.accent_ids)
        return tuple(i for i in range(self.vocab) if i not in banned)

    @property
    def substitution_rate(self) -> float:
        """Expected fraction of voiced accented frames carrying an accent id."""
        hits = sum(1 for i in self.native_ids if i in self.substitutions)
        return self.sub_prob * hits / len(self.native_ids)

    def substitute(self, tok: int, rng: np.random.Generator) -> int:
        if tok in self.substitutions and self.sub_prob > 0 and rng.random() < self.sub_prob:
            return self.substitutions[tok]
        return tok


@dataclass
class SyntheticPair:
    l2_tokens: np.ndarray
    golden: GoldenTarget
    native_tokens: np.ndarray  # native ids at native (unjittered) timing


def generate_pair(task: SyntheticAccentTask, length: int, rng: np.random.Generator) -> tuple[np.ndarray, GoldenTarget]:
    pair = generate_synthetic_pair(task, length, rng)
    return pair.l2_tokens, pair.golden


def generate_synthetic_pair(task: SyntheticAccentTask, length: int, rng: np.random.Generator) -> SyntheticPair:
    if length < 4:
        raise ValueError("pairs need at least 4 frames")
    native_ids = np.array(task.native_ids)
    l2, gold, native = [], [], []
    total = 0
    prev = None
    while total < length:
        if prev not in (None, task.silence_id) and rng.random() < task.silence_prob:
            tok = task.silence_id
        else:
            choices = native_ids[native_ids != prev] if prev is not None else native_ids
            tok = int(rng.choice(choices))
        n = int(rng.integers(task.min_run, task.max_run + 1))
        jittered = n
        if task.jitter_prob > 0 and rng.random() < task.jitter_prob:
            jittered = max(1, n + (1 if rng.random() < 0.5 else -1))
        accented = task.substitute(tok, rng) if tok != task.silence_id else tok
        native.extend([tok] * n)
        l2.extend([accented] * jittered)
        gold.extend([tok] * jittered)
        total += jittered
        prev = tok
    l2_arr = np.array(l2[:length], dtype=np.int64)
    gold_arr = np.array(gold[:length], dtype=np.int64)
    voiced = gold_arr[gold_arr != task.silence_id]
    golden = GoldenTarget(gold_arr, dedup(voiced), "synthetic")
    return SyntheticPair(l2_arr, golden, np.array(native, dtype=np.int64))


def example_seed(base: int, step: int, index: int) -> tuple[int, int, int]:
    return (base, step, index)


def heldout_seed(base: int, index: int) -> tuple[int, int, int]:
    # a step index no training run reaches
    return (base, 2**31 - 1, index)


def make_batch(task: SyntheticAccentTask, seeds: Iterable[tuple[int, ...]], length: int):
    """Examples in canonical (sorted-seed) order so batch reordering cannot change sums."""
    ordered = sorted(tuple(s) for s in seeds)
    pairs = [generate_pair(task, length, np.random.default_rng(list(s))) for s in ordered]
    l2 = np.stack([p[0] for p in pairs])
    frames = np.stack([p[1].frame_tokens for p in pairs])
    ctc = [p[1].ctc_tokens for p in pairs]
    return ordered, l2, frames, ctc, frames != task.silence_id


# --------------------------------------------------------------------- AdamW


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "AdamWState":
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamWState, opt: OptimizerConfig) -> float:
    """One decoupled-weight-decay Adam update; returns the learning rate used."""
    t = state.step
    lr = lr_at(opt, t)
    bc1 = 1.0 - opt.beta1 ** (t + 1)
    bc2 = 1.0 - opt.beta2 ** (t + 1)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        dt = p.data.dtype
        m, v = state.m[name], state.v[name]
        m *= dt.type(opt.beta1)
        m += dt.type(1.0 - opt.beta1) * g
        v *= dt.type(opt.beta2)
        v += dt.type(1.0 - opt.beta2) * (g * g)
        p.data *= dt.type(1.0 - lr * opt.weight_decay)
        step = (m / dt.type(bc1)) / (np.sqrt(v / dt.type(bc2)) + dt.type(opt.eps))
        p.data -= dt.type(lr) * step
    state.step += 1
    return lr


# ---------------------------------------------------------------- training


@dataclass
class LossRecord:
    step: int
    ce: float
    ctc: float
    joint: float
    lr: float

    def line(self) -> str:
        return f"{self.step} {self.ce!r} {self.ctc!r} {self.joint!r} {self.lr!r}"

    @classmethod
    def parse(cls, line: str) -> "LossRecord":
        s, ce, ctc, joint, lr = line.split()
        return cls(int(s), float(ce), float(ctc), float(joint), float(lr))


@dataclass
class TrainResult:
    model: TranslatorModel
    state: AdamWState
    history: list[LossRecord]


def train_step(
    model: TranslatorModel,
    task: SyntheticAccentTask,
    opt: OptimizerConfig,
    state: AdamWState,
    seeds: Sequence[tuple[int, ...]] | None = None,
) -> LossRecord:
    step = state.step
    if seeds is None:
        seeds = [example_seed(opt.seed, step, i) for i in range(opt.batch)]
    ordered, l2, frames, ctc, voiced = make_batch(task, seeds, opt.seq_len)
    params = dict(model.named_parameters())
    model.zero_grad()
    try:
        logits = model.forward(l2)
        loss, ce, ctc_val = joint_loss(logits, frames, ctc, opt.weights, opt.label_smoothing, ctc_frames=voiced)
    except NonFiniteError as exc:
        raise TrainingDivergedError(step, ordered, str(exc)) from exc
    if not math.isfinite(loss.item()):
        raise TrainingDivergedError(step, ordered)
    loss.backward()
    with np.errstate(over="ignore", invalid="ignore"):
        lr = adamw_step(params, {k: p.grad for k, p in params.items() if p.grad is not None}, state, opt)
    bad = [k for k, p in params.items() if not np.all(np.isfinite(p.data))]
    if bad:
        raise TrainingDivergedError(step, ordered, f"update left {bad[0]} non-finite")
    return LossRecord(step, ce, ctc_val, loss.item(), lr)


def train_loop(
    model: TranslatorModel,
    task: SyntheticAccentTask,
    opt: OptimizerConfig,
    state: AdamWState | None = None,
    steps: int | None = None,
    ckpt_path: str | Path | None = None,
    loss_log: str | Path | None = None,
    config_text: str = "",
    callback: Callable[[LossRecord], None] | None = None,
) -> TrainResult:
    """Run until ``opt.max_steps`` total updates (or ``steps`` more, if given)."""
    params = dict(model.named_parameters())
    state = state or AdamWState.zeros_like(params)
    end = opt.max_steps if steps is None else state.step + steps
    history: list[LossRecord] = []
    log_fh = open(loss_log, "a") if loss_log else None
    try:
        while state.step < end:
            rec = train_step(model, task, opt, state)
            history.append(rec)
            if log_fh:
                log_fh.write(rec.line() + "\n")
            if callback:
                callback(rec)
            if rec.step % 100 == 0:
                log.info("step %d ce %.4f ctc %.4f lr %.3g", rec.step, rec.ce, rec.ctc, rec.lr)
            if ckpt_path and opt.ckpt_every and state.step % opt.ckpt_every == 0:
                save_training_checkpoint(ckpt_path, model, state, config_text)
    finally:
        if log_fh:
            log_fh.close()
    if ckpt_path:
        save_training_checkpoint(ckpt_path, model, state, config_text)
    return TrainResult(model, state, history)


# --------------------------------------------------------------- checkpoints


def save_training_checkpoint(path: str | Path, model: TranslatorModel, state: AdamWState | None, config_text: str = "") -> None:
    tensors = dict(model.state_dict())
    if state is not None:
        for k in state.m:
            tensors[f"adamw.m.{k}"] = state.m[k]
            tensors[f"adamw.v.{k}"] = state.v[k]
        tensors["adamw.step"] = np.array(state.step, dtype=np.float64)
    header = f"translator = {translator_config_text(model.cfg)}\n" + config_text
    save_checkpoint(path, tensors, header)


def translator_config_text(cfg: TranslatorConfig) -> str:
    return ",".join(f"{k}:{v}" for k, v in vars(cfg).items())


def parse_translator_config(text: str) -> TranslatorConfig:
    fields = {}
    for item in text.split(","):
        k, v = item.split(":")
        fields[k] = int(v)
    return TranslatorConfig(**fields)


def load_training_checkpoint(path: str | Path) -> tuple[TranslatorModel, AdamWState | None, str]:
    config_text, tensors = load_checkpoint(path)
    first, _, rest = config_text.partition("\n")
    key, _, value = first.partition(" = ")
    if key != "translator":
        raise ValueError(f"{path}: checkpoint header lacks translator config")
    model = TranslatorModel(parse_translator_config(value), dtype=np.float32)
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adamw.")})
    state = None
    if "adamw.step" in tensors:
        names = [k for k, _ in model.named_parameters()]
        state = AdamWState(
            {k: tensors[f"adamw.m.{k}"].copy() for k in names},
            {k: tensors[f"adamw.v.{k}"].copy() for k in names},
            int(tensors["adamw.step"]),
        )
    return model, state, rest


# ---------------------------------------------------------------- evaluation


def heldout_pairs(task: SyntheticAccentTask, n: int, length: int, base_seed: int = 0) -> list[SyntheticPair]:
    return [generate_synthetic_pair(task, length, np.random.default_rng(list(heldout_seed(base_seed, i)))) for i in range(n)]


def frame_accuracy(model: TranslatorModel, pairs: Sequence[SyntheticPair]) -> float:
    l2 = np.stack([p.l2_tokens for p in pairs])
    gold = np.stack([p.golden.frame_tokens for p in pairs])
    return float(np.mean(predict(model, l2) == gold))


def copy_baseline_accuracy(pairs: Sequence[SyntheticPair]) -> float:
    return float(np.mean(np.concatenate([p.l2_tokens == p.golden.frame_tokens for p in pairs])))


def build_model(cfg: TranslatorConfig) -> TranslatorModel:
    return TranslatorModel(cfg, dtype=np.float32)


def with_steps(opt: OptimizerConfig, steps: int) -> OptimizerConfig:
    return replace(opt, max_steps=steps)
