import numpy as np
import pytest

# criterion -> list of (sub-check, passed, detail), filled by tests/test_acceptance.py
_ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def record():
    """record(criterion, check, passed, detail) -> passed; prints a PASS/FAIL line immediately."""

    def _record(criterion: int, check: str, passed: bool, detail: str = "") -> bool:
        passed = bool(passed)
        _ACCEPTANCE.setdefault(criterion, []).append((check, passed, detail))
        print(f"criterion {criterion} [{check}]: {'PASS' if passed else 'FAIL'} {detail}")
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for c in sorted(_ACCEPTANCE):
        checks = _ACCEPTANCE[c]
        ok = all(p for _, p, _ in checks)
        tr.write_line(f"CRITERION {c:2d}: {'PASS' if ok else 'FAIL'}")
        for name, passed, detail in checks:
            tr.write_line(f"    {'pass' if passed else 'FAIL'}  {name}: {detail}")
