"""Shared pytest hooks: collect acceptance verdicts and print them at the end of the run."""

import pytest

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def verdict(request):
    """Record the criterion's one-line verdict; a test that raises is reported as FAIL."""

    class Verdict:
        number: int | None = None
        line: str | None = None

        def __call__(self, number: int, passed: bool, detail: str) -> bool:
            self.number = number
            self.line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
            ACCEPTANCE_LINES[number] = self.line
            print(self.line)
            return passed

    v = Verdict()
    yield v
    rep = getattr(request.node, "rep_call", None)
    number = getattr(request.node.function, "criterion", None)
    if number is not None and number not in ACCEPTANCE_LINES and rep is not None and rep.failed:
        ACCEPTANCE_LINES[number] = f"criterion {number:2d}: FAIL  (raised before a verdict: {rep.longrepr.reprcrash.message})"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
