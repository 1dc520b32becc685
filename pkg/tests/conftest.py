import pytest

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def record():
    """record(number, title, passed, detail) stores one acceptance line."""

    def _record(number: int, title: str, passed: bool, detail: str) -> None:
        ACCEPTANCE[number] = (title, bool(passed), detail)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{number}] {'PASS' if passed else 'FAIL'} {title}: {detail}")
