import pytest

ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def verdict():
    """Record one acceptance line: ``verdict(criterion, passed, detail)``."""
    def record(criterion: str, passed: bool, detail: str) -> bool:
        line = (criterion, bool(passed), detail)
        ACCEPTANCE.append(line)
        print(f"{criterion} {'PASS' if passed else 'FAIL'} {detail}")
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"{criterion:6s} {'PASS' if passed else 'FAIL'}  {detail}")
