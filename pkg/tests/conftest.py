import numpy as np
import pytest
import torch

from sam_matcher.training import TrainConfig, train

ACCEPTANCE_LINES: dict[str, str] = {}


def record_acceptance(key: str, passed: bool, detail: str) -> None:
    line = f"{key} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES[key] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_full():
    """Toy Full model: refiner then matcher, default seeded config."""
    torch.set_num_threads(1)
    model, match_log, ref_log = train(TrainConfig())
    return model, match_log, ref_log


@pytest.fixture(scope="session")
def trained_siamese():
    torch.set_num_threads(1)
    model, match_log, _ = train(TrainConfig(variant="SiameseCNN"))
    return model, match_log
