import pytest

from errpasync.config import Config
from errpasync.pipeline import train_from_seed
from errpasync.simulator import make_profile, run_session

SMALL = Config(n_training_participants=3)


@pytest.fixture(scope="session")
def small_model():
    """Generic model from a reduced donor corpus, for fast closed-loop tests."""
    model, _ = train_from_seed(11, SMALL)
    return model


@pytest.fixture(scope="session")
def closed_loop_session(small_model):
    return run_session(make_profile("P1", 123, "control", 1.0, SMALL), small_model, SMALL)


# --- acceptance summary -----------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when == "teardown":
        return
    n, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if report.failed or (report.when == "call" and n not in _CRITERIA):
        _CRITERIA[n] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        line = f"criterion {n:>2} {status}: {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
