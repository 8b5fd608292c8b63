import pytest

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict = {}

CRITERIA = {
    1: "mask cardinality",
    2: "gradient fidelity",
    3: "loss oracles",
    4: "structure oracles",
    5: "learning signal",
    6: "trend fidelity",
    7: "probe ordering",
    8: "determinism and persistence",
}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records the outcome, then asserts it."""

    def check(n: int, ok: bool, detail: str) -> None:
        prev_ok, prev_detail = ACCEPTANCE.get(n, (True, ""))
        ACCEPTANCE[n] = (prev_ok and bool(ok), "; ".join(s for s in (prev_detail, detail) if s))
        assert ok, f"criterion {n} ({CRITERIA[n]}): {detail}"

    return check


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n not in ACCEPTANCE:
            terminalreporter.write_line(f"[{n}] {name}: NOT RUN")
            continue
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{n}] {name}: {'PASS' if ok else 'FAIL'} ({detail})")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.passed or report.skipped or report.when == "teardown":
        return
    n = mark.args[0]
    ok, detail = ACCEPTANCE.get(n, (True, ""))
    if ok:   # failure not already recorded by the test itself
        reason = report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") else "error"
        ACCEPTANCE[n] = (False, "; ".join(s for s in (detail, f"{item.name}: {reason}") if s))
