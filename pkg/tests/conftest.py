import numpy as np
import pytest

from pedro.config import RunConfig
from pedro.model import ModelConfig, Transformer
from pedro.pipeline import build_backbone
from pedro.tasks import Tokenizer

TINY = ModelConfig(vocab_size=42, d_model=64, n_heads=2, d_ffn=172, n_layers=4, max_seq_len=320)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def small_config():
    return ModelConfig(vocab_size=20, d_model=16, n_heads=2, d_ffn=24, n_layers=2, max_seq_len=64)


@pytest.fixture
def tiny_model():
    return Transformer(TINY, seed=0).freeze()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tok():
    return Tokenizer()


@pytest.fixture(scope="session")
def desk_run_config():
    """Settings used for adaptation experiments on the copy task."""
    return RunConfig()


@pytest.fixture(scope="session")
def pretrained_backbone(desk_run_config):
    """The briefly pretrained frozen backbone, built once per session."""
    return build_backbone(desk_run_config)


# -- acceptance reporting ------------------------------------------------------
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def record(number: int, title: str, ok: bool, detail: str):
    ACCEPTANCE[number] = (title, "PASS" if ok else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{status}] {n:>2}. {title}: {detail}")
