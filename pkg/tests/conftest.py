import numpy as np
import pytest

from amnet.dataio import Interaction
from amnet.encoder import EncoderConfig
from amnet.features import EmbeddingTables, ExerciseVocab
from amnet.simulator import simulate_corpus


@pytest.fixture(scope="session")
def small_corpus():
    return simulate_corpus(n_students=40, n_exercises=30, interactions_per_student=30, seed=11)


@pytest.fixture
def tiny_config():
    return EncoderConfig(n_blocks=1, d_model=8, n_heads=2, ffn_hidden=16, dropout_rate=0.0, input_length=30)


def make_interaction(ex="q1", part=5, correct=1, elapsed=12.0, inactive=30.0, t_ms=0):
    audio = 20.0 if part <= 4 else None
    return Interaction(ex, part, audio, t_ms, elapsed, correct, inactive)


@pytest.fixture
def vocab():
    return ExerciseVocab([f"q{k}" for k in range(10)])


@pytest.fixture
def tables(vocab):
    return EmbeddingTables.init(len(vocab), 8, np.random.default_rng(0))


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance check; all lines are repeated in the run summary."""

    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance verdicts")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
