"""Collects one summary line per acceptance criterion for the terminal report."""

LINES = {}


def record(number, passed, runtime, limit, detail):
    ok = passed and runtime < limit
    LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  ({runtime:.1f}s of {limit:.0f}s)  {detail}"
    print(LINES[number])
    return ok
