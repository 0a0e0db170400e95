import pytest

# (criterion id, passed, detail) rows collected by the acceptance suite
ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    def record(cid: str, passed: bool, detail: str = "") -> bool:
        ACCEPTANCE.append((cid, bool(passed), detail))
        print(f"criterion {cid}: {'PASS' if passed else 'FAIL'} {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, passed, detail in sorted(ACCEPTANCE, key=lambda r: (int(r[0].split(".")[0]), r[0])):
        terminalreporter.write_line(f"criterion {cid:<5} {'PASS' if passed else 'FAIL'}  {detail}")
