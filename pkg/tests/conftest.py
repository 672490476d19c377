import pytest

_VERDICTS: list[str] = []


class Criterion:
    """Collects checks for one acceptance criterion and reports a single PASS/FAIL line."""

    def __init__(self, name: str):
        self.name = name
        self.failures: list[str] = []
        self.notes: list[str] = []

    def check(self, ok: bool, what: str) -> None:
        if not ok:
            self.failures.append(what)

    def note(self, text: str) -> None:
        self.notes.append(text)

    def finish(self) -> None:
        status = "PASS" if not self.failures else "FAIL"
        detail = "; ".join(self.notes + [f"failed: {f}" for f in self.failures])
        line = f"{status} {self.name}: {detail}"
        _VERDICTS.append(line)
        print(line)
        assert not self.failures, line


@pytest.fixture
def criterion(request):
    return lambda name: Criterion(name)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
