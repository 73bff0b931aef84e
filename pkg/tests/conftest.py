import pytest

_LINES = []


class AcceptanceLog:
    """Collects one verdict line per acceptance check; printed in the terminal summary."""

    def record(self, key, description, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {description}" + (f" ({detail})" if detail else "")
        _LINES.append(line)
        print(line)
        return ok


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
