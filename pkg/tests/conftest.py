import contextlib
import time

import pytest

_LINES: list[str] = []


class _Outcome:
    def __init__(self):
        self.detail = ""


@contextlib.contextmanager
def _criterion(number: int, title: str):
    out = _Outcome()
    start = time.perf_counter()
    try:
        yield out
    except BaseException as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        _record(f"criterion {number:2d} FAIL  {title}: {msg[:160]}")
        raise
    _record(f"criterion {number:2d} PASS  {title}: {out.detail} "
            f"[{time.perf_counter() - start:.1f} s]")


def _record(line: str) -> None:
    _LINES.append(line)
    print(line)


@pytest.fixture
def criterion():
    """Context manager that records one PASS/FAIL line for an acceptance criterion."""
    return _criterion


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
