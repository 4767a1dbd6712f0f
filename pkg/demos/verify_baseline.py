"""
Running a verification suite from Python
========================================

The same suites back `hypobridge verify`.  Each report carries its
estimate, the checks it was judged by, and a pass flag recomputed from
those checks.
"""

from hypobridge.suites import run_suite

reports = run_suite("baseline", {"seed": 42, "jobs": 1})
for r in reports:
    print(f"{'PASS' if r.passed else 'FAIL'}  {r.statistic:45s} {r.estimate}")
