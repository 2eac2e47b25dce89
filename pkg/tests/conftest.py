import pytest

# acceptance outcomes, printed as one line per criterion at the end of the session
RESULTS: dict[str, tuple[str, str]] = {}


@pytest.fixture
def record():
    def _record(name: str, passed: bool | None, detail: str) -> bool | None:
        status = "INFO" if passed is None else ("PASS" if passed else "FAIL")
        RESULTS[name] = (status, detail)
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(RESULTS, key=lambda n: (int(n[1:].split("-")[0]), n)):
        status, detail = RESULTS[name]
        terminalreporter.write_line(f"{status:4} {name}: {detail}")
