import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_report():
    """Collects one ``PASS``/``FAIL`` line per acceptance criterion, printed at the end of the run."""

    def record(number: int, passed: bool, title: str, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}: {title} ({detail})"
        _ACCEPTANCE[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
