"""Floating-point operation counter for the integer-only contract.

The INT8 training path must execute zero floating-point arithmetic when
the sign estimator runs in integer mode.  Every code site in the INT8
engine that *does* touch floats (dequantized oracles, the float-reference
sign mode) reports through :func:`note`, and integer kernels defend their
boundaries with :func:`assert_integer`.  A test can then reset the
counter, run an epoch and assert it is still zero.
"""

from __future__ import annotations

import numpy as np

_count = 0


def note(n: int = 1) -> None:
    """Record that ``n`` floating-point operations were performed."""
    global _count
    _count += n


def reset() -> None:
    global _count
    _count = 0


def count() -> int:
    return _count


def assert_integer(arr: np.ndarray, what: str = "array") -> None:
    """Guard an integer kernel boundary against float leakage."""
    if not np.issubdtype(np.asarray(arr).dtype, np.integer):
        raise TypeError(f"{what} has non-integer dtype {np.asarray(arr).dtype}")
