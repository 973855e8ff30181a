import time

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

# (criterion, passed, detail) lines collected by the acceptance suite
ACCEPTANCE_LINES: list[tuple[int, bool, str]] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class Criterion:
    """Collects the sub-checks of one acceptance criterion and reports a single line."""

    def __init__(self, number: int, budget_s: float):
        self.number = number
        self.budget_s = budget_s
        self.t0 = time.perf_counter()
        self.results: list[tuple[str, bool, str]] = []
        self.reported = False

    def check(self, name: str, ok, detail: str = "") -> bool:
        self.results.append((name, bool(ok), detail))
        return bool(ok)

    def finish(self, extra_seconds: float = 0.0) -> None:
        elapsed = time.perf_counter() - self.t0 + extra_seconds
        self.check("runtime", elapsed < self.budget_s, f"{elapsed:.1f}s < {self.budget_s:g}s")
        ok = all(r[1] for r in self.results)
        detail = "; ".join(f"{n} {'ok' if r else 'FAILED'}" + (f" ({d})" if d else "") for n, r, d in self.results)
        ACCEPTANCE_LINES.append((self.number, ok, detail))
        self.reported = True
        failed = [f"{n}: {d}" for n, r, d in self.results if not r]
        assert ok, f"criterion {self.number} failed: " + "; ".join(failed)


@pytest.fixture
def criterion(request):
    made = []

    def make(number: int, budget_s: float) -> Criterion:
        c = Criterion(number, budget_s)
        made.append(c)
        return c

    yield make
    for c in made:
        if not c.reported:
            done = "; ".join(f"{n} {'ok' if r else 'FAILED'}" for n, r, _ in c.results)
            ACCEPTANCE_LINES.append((c.number, False, "raised an error" + (f" after: {done}" if done else "")))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in sorted(ACCEPTANCE_LINES, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {crit:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
