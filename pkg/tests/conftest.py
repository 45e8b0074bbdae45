from pathlib import Path

import pytest

RESULTS: list[str] = []
RESULTS_FILE = Path(__file__).resolve().parents[1] / "acceptance_results.txt"


@pytest.fixture(scope="session")
def verdicts():
    return RESULTS


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in RESULTS:
        terminalreporter.write_line(line)
    RESULTS_FILE.write_text("\n".join(RESULTS) + "\n")
