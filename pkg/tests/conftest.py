import numpy as np
import pytest

from ethsim.harness import bundled_scenarios, parse_scenario, run_ensemble

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def bundled_runs(tmp_path_factory):
    """Every bundled scenario run once with its own seed; shared across test modules."""
    root = tmp_path_factory.mktemp("bundled")
    out = {}
    for path in bundled_scenarios():
        sc = parse_scenario(path)
        out[sc.name] = (sc, run_ensemble(sc, root / sc.name))
    return out


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_ac" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE[name] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        status, detail = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{status} {name} {detail}".rstrip())
