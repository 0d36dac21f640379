import pytest
import torch

from affectdiff.config import ExperimentConfig
from affectdiff.data import generate_synthetic, prepare


def tiny_config(**values) -> ExperimentConfig:
    """A model small enough for finite differences and sub-second training steps."""
    base = dict(
        data__text_dim=12, data__audio_dim=7, data__video_dim=5, data__seq_len=8, data__n_samples=160,
        encoders__hidden=8, encoders__layers=1, encoders__heads=2,
        fusion_vae__latent_dim=8, diffusion__base_dim=8, diffusion__steps=20,
        train__batch_size=16, train__epochs=2, train__eval_batch_size=64,
    )
    base.update(values)
    return ExperimentConfig().with_values(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("tiny_data")
    generate_synthetic(path, tiny_config().data)
    return path


@pytest.fixture(scope="session")
def tiny_data(tiny_data_dir):
    return prepare(tiny_data_dir, tiny_config().data)


@pytest.fixture
def double_precision():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number, ok: bool, detail: str):
    """Log one acceptance line for the terminal summary, then assert on it."""
    line = f"AC-{number:<3} {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
