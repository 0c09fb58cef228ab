import numpy as np
import pytest

from hearaug.fixtures import speech_like, write_fixtures


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def speech():
    """3 s of speech-like signal at 16 kHz."""
    return speech_like(3.0, np.random.default_rng(5))


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Synthetic corpus: 4 talkers, 8 directions; returns the index path."""
    root = tmp_path_factory.mktemp("corpus")
    return write_fixtures(root, seed=11, talkers=4, directions=8, utterances=2, noises=4)


# Acceptance reporting: one PASS/FAIL line per criterion in the terminal summary.

def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")
    config._acceptance = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else "FAIL"
    item.config._acceptance[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, status, detail = results[number]
        terminalreporter.write_line(f"[{status}] {number:>2}. {title} | {detail}")
