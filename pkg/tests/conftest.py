import time

import numpy as np
import pytest

from accentstream.codec import Codebook
from accentstream.stream import Pipeline
from accentstream.synth import TokenPalette, palette_codebook
from accentstream.train import OptimizerConfig, SyntheticAccentTask, build_model, train_loop
from accentstream.translator import TranslatorConfig

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (ok, detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_task() -> SyntheticAccentTask:
    return SyntheticAccentTask()


@pytest.fixture(scope="session")
def trained(desk_task):
    """Desk-config translator trained 3000 steps on the 16-token substitution task."""
    model = build_model(TranslatorConfig())
    opt = OptimizerConfig(max_steps=3000)
    t0 = time.perf_counter()
    result = train_loop(model, desk_task, opt)
    return model, result, time.perf_counter() - t0


@pytest.fixture(scope="session")
def palette() -> TokenPalette:
    return TokenPalette()


@pytest.fixture(scope="session")
def palette_book(palette) -> Codebook:
    return palette_codebook(palette)


@pytest.fixture(scope="session")
def trained_pipeline(trained, palette_book) -> Pipeline:
    return Pipeline(palette_book, trained[0])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
