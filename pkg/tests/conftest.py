"""Collects acceptance verdicts and prints them as a block at the end of the run."""

VERDICTS: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> bool:
    VERDICTS[number] = f"CRITERION {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(VERDICTS[number])
    return passed


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[number])
