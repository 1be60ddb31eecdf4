import os

import pytest
import torch
from hypothesis import HealthCheck, settings

from toy import RunCache, build_corpus

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    return build_corpus(tmp_path_factory.mktemp("toy"))


@pytest.fixture(scope="session")
def toy_runs(toy_corpus, tmp_path_factory):
    return RunCache(toy_corpus, tmp_path_factory.mktemp("runs"))


@pytest.fixture
def acceptance_report():
    def report(number, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
