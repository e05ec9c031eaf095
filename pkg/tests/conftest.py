import pytest

ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def acceptance_log():
    def record(number, ok: bool, detail: str) -> None:
        number = str(number)
        ACCEPTANCE[number] = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        print(ACCEPTANCE[number])

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
