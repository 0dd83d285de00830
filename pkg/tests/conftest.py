import pytest

_LINES = []


@pytest.fixture(scope="session")
def criterion():
    """report(number, name, ok, detail) -> ok; the line is echoed in the terminal summary."""

    def report(number, name, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {name} | {detail}"
        _LINES.append(line)
        print(line)
        return bool(ok)

    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
