import pytest

# criterion number -> (status, message); filled by test_acceptance.py
ACCEPTANCE = {}


def record(number: int, status: str, message: str) -> None:
    ACCEPTANCE[number] = (status, message)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, message = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {message}")


@pytest.fixture
def acceptance():
    return record
