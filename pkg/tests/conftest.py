import pytest

_criteria: dict[int, tuple[str, str, str]] = {}
_STATUS = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        number, title = marker.args
        measured = "; ".join(str(v) for k, v in item.user_properties if k == "measured")
        if rep.outcome == "skipped" and not measured:
            measured = str(rep.longrepr[-1]) if isinstance(rep.longrepr, tuple) else ""
        _criteria[number] = (_STATUS[rep.outcome], title, measured)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, title, measured = _criteria[number]
        line = f"criterion {number:>2} {status}: {title}"
        terminalreporter.write_line(f"{line} [{measured}]" if measured else line)
