import pytest

_ACCEPTANCE: dict[int, list[str]] = {}


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion, printed in the run summary."""

    def _report(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
        _ACCEPTANCE.setdefault(n, []).append(line)
        print(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            for line in _ACCEPTANCE[n]:
                terminalreporter.write_line(line)
