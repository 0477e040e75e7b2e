import pytest

_CRITERIA = []


class CriterionLog:
    """Records one PASS/FAIL line per acceptance criterion and asserts it."""

    def check(self, cid, ok, detail):
        line = f"criterion {cid:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA.append((cid, line))
        print(line)
        assert ok, line


@pytest.fixture(scope="session")
def criteria():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
