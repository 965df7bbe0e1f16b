import pytest

# (criterion, verdict, detail) lines appended by test_acceptance.py
ACCEPTANCE: list[tuple[int, str, str]] = []


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, verdict, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}: {verdict}  {detail}")
