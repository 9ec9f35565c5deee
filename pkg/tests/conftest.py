import contextlib
import time

import pytest

_LINES = pytest.StashKey[list]()


class CriterionLog:
    def __init__(self, lines):
        self.lines = lines

    @contextlib.contextmanager
    def criterion(self, number, title, budget_s):
        start = time.perf_counter()
        detail = {}
        try:
            yield detail
        except BaseException as exc:
            self._emit("FAIL", number, title, time.perf_counter() - start, budget_s, detail, exc)
            raise
        elapsed = time.perf_counter() - start
        status = "PASS" if elapsed < budget_s else "FAIL"
        self._emit(status, number, title, elapsed, budget_s, detail)
        assert elapsed < budget_s, f"criterion {number} took {elapsed:.1f}s (budget {budget_s}s)"

    def _emit(self, status, number, title, elapsed, budget_s, detail, exc=None):
        extra = "; ".join(f"{k}={v}" for k, v in detail.items())
        line = f"{status} criterion {number}: {title} [{elapsed:.1f}s / {budget_s}s]"
        if extra:
            line += f" {extra}"
        if exc is not None:
            line += f" ({type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''})"
        self.lines.append(line)
        print(line)


@pytest.fixture(scope="session")
def acceptance(request):
    lines = request.config.stash.setdefault(_LINES, [])
    return CriterionLog(lines)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
