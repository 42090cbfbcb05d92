"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

_ACCEPTANCE = "test_acceptance.py"
_labels: dict[str, str] = {}
_outcomes: dict[str, tuple[str, str]] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        if item.nodeid.split("::")[0].endswith(_ACCEPTANCE):
            doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
            callspec = getattr(item, "callspec", None)
            if callspec is not None:
                doc += f" [{callspec.id}]"
            _labels[item.nodeid] = doc


def pytest_runtest_logreport(report):
    if report.nodeid not in _labels:
        return
    label, status = _outcomes.get(report.nodeid, (_labels[report.nodeid], "NOT RUN"))
    if report.failed:
        status = "FAIL"
    elif report.skipped:
        status = "SKIP"
    elif report.when == "call" and status != "FAIL":
        status = "PASS"
    _outcomes[report.nodeid] = (label, status)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in _labels:
        if nodeid in _outcomes:
            label, status = _outcomes[nodeid]
            terminalreporter.write_line(f"{status:7s} {label}")
