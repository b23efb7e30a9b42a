import sys

import numpy as np
import pytest
import yaml

from biokin.mesh import synthetic_body
from biokin.skeleton import builtin_skeleton, builtin_skeleton_path


@pytest.fixture(scope="session")
def body_model():
    return builtin_skeleton("full_body_24")


@pytest.fixture(scope="session")
def chain_model():
    return builtin_skeleton("chain3")


@pytest.fixture(scope="session")
def body_doc():
    return yaml.safe_load(builtin_skeleton_path("full_body_24").read_text())


@pytest.fixture(scope="session")
def chain_doc():
    return yaml.safe_load(builtin_skeleton_path("chain3").read_text())


@pytest.fixture(scope="session")
def mesh():
    return synthetic_body(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
