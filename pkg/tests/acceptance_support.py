"""Bookkeeping shared by the acceptance tests: one pass/fail line per criterion."""

import time
from contextlib import contextmanager

from conftest import ACCEPTANCE_LINES


class Criterion:
    def __init__(self, number, title, budget_s):
        self.number, self.title, self.budget_s = number, title, budget_s
        self.checks = []  # (description, ok)

    def check(self, ok, description):
        self.checks.append((description, bool(ok)))
        return bool(ok)

    @property
    def failures(self):
        return [d for d, ok in self.checks if not ok]


@contextmanager
def criterion(number, title, budget_s):
    c = Criterion(number, title, budget_s)
    start = time.perf_counter()
    error = None
    try:
        yield c
    except Exception as exc:  # reported, then re-raised
        error = exc
        raise
    finally:
        elapsed = time.perf_counter() - start
        c.check(elapsed < budget_s, f"runtime {elapsed:.1f}s < {budget_s:.0f}s")
        if error is not None:
            c.check(False, f"{type(error).__name__}: {error}")
        status = "PASS" if not c.failures else "FAIL"
        detail = "; ".join(d for d, _ in c.checks) if status == "PASS" else "; ".join(c.failures)
        line = f"[{status}] criterion {c.number}: {c.title} ({elapsed:.1f}s) -- {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    assert not c.failures, "; ".join(c.failures)
