import pytest

_verdicts: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one line per acceptance criterion; printed in the terminal summary."""
    def record(number, passed, detail=""):
        status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
        line = f"criterion {number:>2}: {status:<4} {detail}".rstrip()
        _verdicts.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_verdicts, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
