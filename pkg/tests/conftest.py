import contextlib
import time

import pytest

_LINES = {}


class Verdict:
    def __init__(self, number, title, budget):
        self.number, self.title, self.budget = number, title, budget
        self.passed = None
        self.details = []
        self.start = time.perf_counter()

    def note(self, text):
        self.details.append(text)

    def require(self, ok, text):
        """Record one sub-check; the criterion passes only if every sub-check does."""
        self.details.append(("ok: " if ok else "FAILED: ") + text)
        self.passed = bool(ok) and self.passed is not False

    def line(self):
        elapsed = time.perf_counter() - self.start
        in_budget = elapsed < self.budget
        ok = self.passed is True and in_budget
        status = "PASS" if ok else "FAIL"
        body = "; ".join(self.details)
        return (f"criterion {self.number} {status} | {self.title} | {body} | "
                f"runtime {elapsed:.1f}s (budget {self.budget:g}s)"), ok


@pytest.fixture
def criterion(request):
    """Context manager that prints one PASS/FAIL line and fails the test on FAIL."""

    @contextlib.contextmanager
    def run(number, title, budget):
        v = Verdict(number, title, budget)
        try:
            yield v
        except Exception as exc:
            v.require(False, f"{type(exc).__name__}: {exc}")
            raise
        finally:
            text, ok = v.line()
            _LINES[number] = text
            print("\n" + text)
        assert ok, text

    return run


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(_LINES):
            terminalreporter.write_line(_LINES[number])
