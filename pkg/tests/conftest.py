import pytest

_ACCEPTANCE = {}


@pytest.fixture
def record_criterion(request):
    """Register the outcome line for an acceptance criterion."""
    def record(number, title, detail=""):
        _ACCEPTANCE[request.node.nodeid] = (number, title, detail)
    return record


def pytest_runtest_makereport(item, call):
    if call.when == "call" and item.nodeid in _ACCEPTANCE:
        number, title, detail = _ACCEPTANCE[item.nodeid]
        _ACCEPTANCE[item.nodeid] = (number, title, detail, call.excinfo is None)


def pytest_terminal_summary(terminalreporter):
    rows = sorted((v for v in _ACCEPTANCE.values() if len(v) == 4), key=lambda v: v[0])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, detail, ok in rows:
        extra = f"  ({detail})" if detail else ""
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: "
                                    f"{title}{extra}")
