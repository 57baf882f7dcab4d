import numpy as np
import pytest

from trsp import autodiff as ad
from trsp.data import corpus_from_text, sample_calibration, synthetic_text
from trsp.model import ModelConfig, init_model

# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


@pytest.fixture(autouse=True)
def _fresh_tape():
    ad.reset_tape()
    yield
    ad.reset_tape()


def tiny_config(**kw) -> ModelConfig:
    base = dict(n_layers=4, d_model=16, n_heads=2, vocab_size=13, max_seq=12)
    base.update(kw)
    return ModelConfig(**base)


def perturbed(state, seed=0, scale=0.3):
    """Give every parameter (gates included) generic non-trivial values."""
    rng = np.random.default_rng(seed)
    for p in state.parameters(include_gates=False):
        p.data += rng.normal(0, scale, size=p.data.shape)
    return state


def random_tokens(cfg: ModelConfig, batch=2, seq=None, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, cfg.vocab_size, size=(batch, seq or cfg.max_seq))


@pytest.fixture
def tiny_state():
    return perturbed(init_model(tiny_config(), seed=0))


@pytest.fixture(scope="session")
def small_corpus():
    return corpus_from_text(synthetic_text(20_000, seed=0))


@pytest.fixture(scope="session")
def small_calib(small_corpus):
    return sample_calibration(small_corpus, 8, 12, seed=0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
