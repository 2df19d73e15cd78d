import sys
import time

SUITE_BUDGET_S = 120.0
_start = time.perf_counter()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    elapsed = time.perf_counter() - _start
    module = sys.modules.get("test_acceptance")
    lines = list(getattr(module, "RESULTS", []))
    if lines:
        ok = elapsed <= SUITE_BUDGET_S
        lines.append(f"[{'PASS' if ok else 'FAIL'}] 9. suite runtime: {elapsed:.1f}s (<= {SUITE_BUDGET_S:.0f}s)")
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


def pytest_sessionfinish(session, exitstatus):
    if time.perf_counter() - _start > SUITE_BUDGET_S and exitstatus == 0:
        session.exitstatus = 1
