import numpy as np
import pytest
from hypothesis import settings

from mga.corpus import SyntheticConfig, synth_generate
from mga.encoders import DualEncoder, EncoderConfig

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    """Encoder small enough for exhaustive finite differences: 8x8 images, 2x2 grid."""
    return EncoderConfig(dim=8, hidden=8, patch_side=4, grid=2, buckets=32, seed=3)


@pytest.fixture
def small_model(small_config):
    return DualEncoder.init(small_config, temp=0.3)


@pytest.fixture(scope="session")
def tiny_corpus():
    """60 synthetic 32x32 examples with four classes."""
    cfg = SyntheticConfig(image_side=32, radius_range=(1.5, 2.5), jitter=2.0)
    return synth_generate(cfg, 60, seed=5)


@pytest.fixture(scope="session")
def tiny_encoder_config():
    return EncoderConfig(dim=16, hidden=16, patch_side=8, grid=4, buckets=256, seed=0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number: int, result):
        line = f"[criterion {number}] {result.line()}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
