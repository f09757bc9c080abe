import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(capsys):
    """Record and print one PASS/FAIL line per acceptance criterion, then assert it."""

    def report(name: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n    {line}")
        assert passed, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
