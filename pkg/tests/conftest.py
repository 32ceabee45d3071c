import numpy as np
import pytest

from erinet.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_config():
    """Test-only toy size: d_model 8, one block, two heads."""
    return ModelConfig(
        visual_dim=6, audio_dim=5, gru_layers=1, hidden=8, encoder_blocks=1, heads=2, dropout=0.0, seed=3
    )


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
