import re

import pytest

ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, title: str, passed: bool, detail: str) -> str:
    line = f"[criterion {criterion:2d}] {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


@pytest.fixture
def acceptance_record(request):
    def rec(criterion, title, passed, detail):
        request.node.recorded = True
        return record(criterion, title, passed, detail)
    return rec


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    out = yield
    rep = out.get_result()
    m = re.match(r"test_c(\d+)_(\w+?)(\[|$)", item.name)
    if m and rep.when == "call" and rep.failed and not getattr(item, "recorded", False):
        # the test raised before reporting its measurement
        err = call.excinfo.typename if call.excinfo else "error"
        record(int(m.group(1)), m.group(2).replace("_", " "), False, f"raised {err}: {call.excinfo.value}"[:200])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
