import pytest

ACCEPTANCE_MODULE = "test_acceptance.py"


def pytest_configure(config):
    config._acceptance = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if ACCEPTANCE_MODULE in report.nodeid and (report.when == "call" or report.failed):
        item.config._acceptance.setdefault(report.nodeid, report)
        if report.failed:
            item.config._acceptance[report.nodeid] = report


def pytest_terminal_summary(terminalreporter, config):
    """One pass/fail line per acceptance criterion."""
    store = getattr(config, "_acceptance", {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(store, key=lambda n: int(n.split("::test_c")[1].split("_")[0])):
        report = store[nodeid]
        number, label = nodeid.split("::test_c")[1].split("_", 1)
        status = "PASS" if report.passed else "FAIL"
        extra = "; ".join(f"{k}={v}" for k, v in report.user_properties)
        line = f"criterion {number} {status}  {label.replace('_', ' ')}"
        terminalreporter.write_line(line + (f"  [{extra}]" if extra else ""))
