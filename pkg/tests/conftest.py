"""Shared test plumbing: the acceptance summary printed after the run."""

from typing import List, Tuple

ACCEPTANCE_RESULTS: List[Tuple[str, bool, str]] = []


def record_criterion(name: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS.append((name, ok, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        status = "PASS" if ok else "FAIL"
        suffix = f" - {detail}" if detail else ""
        terminalreporter.write_line(f"{status} {name}{suffix}")
