"""Pass/fail table over the acceptance checks."""
from __future__ import annotations

import tempfile

from . import acceptance


def run_selftest(full: bool = False, stream=None) -> bool:
    """Run criteria 1-5 (and 6-10 when ``full``); print one line each; True if all pass."""
    results = []

    def emit(result):
        results.append(result)
        print(result.line(), file=stream, flush=True)

    for check in acceptance.FAST_CRITERIA:
        emit(check())
    if full:
        runs = acceptance.TrainingRuns()
        with tempfile.TemporaryDirectory(prefix="spotkit-selftest-") as work:
            for result in acceptance.training_criteria(runs, work):
                emit(result)
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} checks passed", file=stream, flush=True)
    return passed == len(results)
