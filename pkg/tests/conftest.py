import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory):
    from kdistill.data import make_fixture

    root = tmp_path_factory.mktemp("fixture8")
    make_fixture(root, [30] * 8, seed=0)
    return root


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    return pytestconfig.acceptance_lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)
