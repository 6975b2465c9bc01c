import pytest

N_CRITERIA = 9
_results: dict[int, tuple[bool, str]] = {}
_collected = False


def pytest_collection_modifyitems(items):
    global _collected
    _collected = any(item.module.__name__.endswith("test_acceptance") for item in items)


@pytest.fixture
def criterion():
    """Record one acceptance criterion; prints a PASS/FAIL line and asserts."""

    def record(n: int, ok: bool, detail: str) -> None:
        _results[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, f"criterion {n}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _collected:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        ok, detail = _results.get(n, (False, "not run to completion"))
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
