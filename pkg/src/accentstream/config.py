"""Whole-pipeline configuration with a lossless ``section.key = value`` text form."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .dsp import FrameSpec
from .stream import ChunkConfig, LookaheadBudget, SamplerConfig, parse_key_values
from .train import OptimizerConfig, SyntheticAccentTask
from .translator import TranslatorConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Paths:
    codebook: str = ""
    checkpoint: str = ""
    pairs: str = ""
    golden: str = ""
    out: str = "out"


@dataclass(frozen=True)
class PipelineConfig:
    paths: Paths = Paths()
    frame: FrameSpec = FrameSpec()
    chunk: ChunkConfig = ChunkConfig()
    budget: LookaheadBudget = LookaheadBudget()
    sampler: SamplerConfig = SamplerConfig()
    optim: OptimizerConfig = OptimizerConfig()
    translator: TranslatorConfig = TranslatorConfig()
    task: SyntheticAccentTask = field(default_factory=SyntheticAccentTask)
    seed: int = 0

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Propagate one global seed into every seeded component."""
        return replace(
            self,
            seed=seed,
            sampler=replace(self.sampler, seed=seed),
            optim=replace(self.optim, seed=seed),
            translator=replace(self.translator, seed=seed),
            task=replace(self.task, seed=seed),
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "seed":
                lines.append(f"seed = {value}")
                continue
            for sub in fields(value):
                lines.append(f"{f.name}.{sub.name} = {_format(getattr(value, sub.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        try:
            kv = parse_key_values(text)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        base = cls()
        sections: dict[str, dict] = {}
        seed = base.seed
        for key, raw in kv.items():
            if key == "seed":
                seed = _parse(raw, 0, key)
                continue
            section, _, name = key.partition(".")
            if not name or section not in {f.name for f in fields(cls)}:
                raise ConfigError(f"unknown config key {key!r}")
            current = getattr(base, section)
            if name not in {f.name for f in fields(current)}:
                raise ConfigError(f"unknown config key {key!r}")
            sections.setdefault(section, {})[name] = _parse(raw, getattr(current, name), key)
        built = {}
        for section, values in sections.items():
            try:
                built[section] = replace(getattr(base, section), **values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{section}] {exc}") from exc
        return replace(base, seed=seed, **built)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, dict):
        return ",".join(f"{k}:{v}" for k, v in sorted(value.items()))
    return str(value)


def _parse(raw: str, like, key: str):
    """Parse ``raw`` into the type of the default value ``like``."""
    try:
        if isinstance(like, bool):
            if raw not in ("true", "false"):
                raise ValueError(f"expected true/false, got {raw!r}")
            return raw == "true"
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, dict):
            if not raw:
                return {}
            pairs = (item.split(":") for item in raw.split(","))
            return {int(a): int(b) for a, b in pairs}
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
