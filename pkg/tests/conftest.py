from pathlib import Path

import numpy as np
import pytest

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture(scope="session")
def scenario_dir():
    return SCENARIO_DIR


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Callable ``(criterion, passed, detail)`` that prints and records one verdict line."""
    lines = request.config._acceptance_lines
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def report(criterion, passed, detail=""):
        verdict = "PASS" if passed is True else ("FAIL" if passed is False else str(passed))
        line = f"[acceptance] criterion {criterion}: {verdict}  {detail}".rstrip()
        lines.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
