import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "ppboot",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ppboot")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# shared brute-force oracles live next to this file
sys.path.insert(0, os.path.dirname(__file__))


def pytest_configure(config):
    config.ppboot_acceptance = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "ppboot_acceptance", [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""

    def report(k, checks):
        bad = [f"{name}: {detail}" for name, ok, detail in checks if not ok]
        good = [f"{name}: {detail}" for name, ok, detail in checks if ok]
        line = f"{'PASS' if not bad else 'FAIL'} criterion {k}: " + "; ".join(bad or good)
        request.config.ppboot_acceptance.append(line)
        print(line)
        assert not bad, line

    return report
