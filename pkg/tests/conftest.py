"""Shared pytest plumbing: per-criterion pass/fail lines for the acceptance suite."""
import pytest

_results: list[tuple[str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call" and item.module.__name__ == "test_acceptance":
        doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
        _results.append((doc, "PASS" if rep.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for doc, status in _results:
        terminalreporter.write_line(f"[{status}] {doc}")
