import pytest

# (criterion number, passed, detail) appended by test_acceptance.py
ACCEPTANCE: list = []


@pytest.fixture
def criterion():
    def record(n: int, ok: bool, detail: str) -> None:
        ACCEPTANCE.append((n, bool(ok), detail))
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, f"criterion {n}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
