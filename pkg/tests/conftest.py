"""Session fixtures: warmed kernels, toy corpora, trained toy models."""

from __future__ import annotations

import pytest

import toys
from hcc import kernels


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    kernels.warm_up()


@pytest.fixture(scope="session")
def toy_corpus():
    return toys.training_corpus()


@pytest.fixture(scope="session")
def five_images():
    return toys.eval_images(5)


@pytest.fixture(scope="session")
def held_out():
    return toys.held_out_images()


@pytest.fixture(scope="session")
def toy_base(toy_corpus):
    return toys.train_toy_base()


@pytest.fixture(scope="session")
def toy_hyper(toy_base):
    return toys.train_toy_hyper(toy_base)


@pytest.fixture(scope="session")
def arm_hyper(toy_base):
    return toys.train_toy_hyper(toy_base, components=("arm",),
                                steps=toys.ABLATION_STEPS, seed=13)


@pytest.fixture(scope="session")
def upsyn_hyper(toy_base):
    return toys.train_toy_hyper(toy_base, components=("ups", "syn"),
                                steps=toys.ABLATION_STEPS, seed=14)


@pytest.fixture(scope="session")
def engineered():
    return toys.engineered_pair()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    lines = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance" in nodeid and "::test_criterion" in nodeid:
                name = nodeid.split("::", 1)[1]
                lines.append((name, status.upper()))
    if not lines:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, status in sorted(lines):
        terminalreporter.write_line(f"{name}: {status}")
