"""Shared test utilities."""
import numpy as np


def poisson_stream(rng, rate, duration_ps, start=0):
    """Sorted unique integer-ps Poisson arrivals."""
    n = rng.poisson(rate * duration_ps / 1e12)
    return np.unique(rng.integers(start, start + duration_ps, n))


# criterion number -> (passed, detail); filled by the acceptance tests and
# printed at the end of the session by conftest
ACCEPTANCE = {}


def record(criterion, passed, detail):
    ACCEPTANCE[criterion] = (bool(passed), detail)
    line = f"CRITERION {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)
    return line
