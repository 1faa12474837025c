"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line per criterion."""

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        props = dict(report.user_properties)
        _ACCEPTANCE[report.nodeid] = (report.outcome, props.get("criterion", report.nodeid),
                                      props.get("detail", ""), report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_ACCEPTANCE):
        outcome, name, detail, duration = _ACCEPTANCE[nodeid]
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"{status}  {name} ({duration:.1f}s)"
        if detail:
            line += f"  {detail}"
        terminalreporter.write_line(line)
