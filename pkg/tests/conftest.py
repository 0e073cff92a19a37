from importlib import resources
from pathlib import Path

import pytest

from resipkit.synth import write_demo_capture


@pytest.fixture(scope="session")
def bundled_demo() -> Path:
    with resources.as_file(resources.files("resipkit").joinpath("data/demo.pcap")) as p:
        yield Path(p)


@pytest.fixture(scope="session")
def demo_pcap(tmp_path_factory) -> Path:
    return write_demo_capture(tmp_path_factory.mktemp("demo") / "demo.pcap")


_criteria: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when == "teardown":
        return
    number, title = mark.args
    ok = report.passed if report.when == "call" else not report.failed
    prev = _criteria.get(number, (title, True))[1]
    _criteria[number] = (title, prev and ok and not report.skipped)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok = _criteria[number]
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}")
