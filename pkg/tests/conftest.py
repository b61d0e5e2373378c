from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from projplan.conditioning import Layout
from projplan.data import SyntheticConfig, generate_synthetic

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_layout():
    return Layout(n_actions=6, obs_dim=4, n_tasks=3, horizons=(3,), task_mode="concat")


@pytest.fixture(scope="session")
def toy_corpus():
    return generate_synthetic(SyntheticConfig(branching=1, videos_per_task=12, seed=3))


def numeric_jvp(f, x: np.ndarray, v: np.ndarray, h: float = 1e-3) -> float:
    """Central difference of scalar f along direction v."""
    return (f(x + h * v) - f(x - h * v)) / (2 * h)


def component_derivative(f, p: np.ndarray, index, h: float = 1e-3) -> float:
    """Central difference of scalar f with respect to one entry of array p (mutated in place, restored)."""
    saved = p[index]
    p[index] = saved + h
    up = f()
    p[index] = saved - h
    down = f()
    p[index] = saved
    return (up - down) / (2 * h)


def close(analytic: float, numeric: float, rel: float = 1e-3, floor: float = 1e-6) -> bool:
    diff = abs(analytic - numeric)
    return diff <= floor or diff <= rel * max(abs(analytic), abs(numeric))


# -- acceptance reporting: one PASS/FAIL line per criterion ---------------------------------------

_VERDICTS: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    entry = _VERDICTS.setdefault(number, [True, title, []])
    entry[0] = entry[0] and report.passed
    if detail:
        entry[2].append(detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        ok, title, details = _VERDICTS[number]
        line = f"{'PASS' if ok else 'FAIL'} C{number} {title}"
        terminalreporter.write_line(line + (" | " + "; ".join(details) if details else ""))
