import pytest

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"criterion {cid:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record():
    def _record(cid: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[cid] = (bool(ok), detail)
        print(f"criterion {cid:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return _record
