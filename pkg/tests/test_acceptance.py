"""Acceptance gate: every headline criterion at its stated tolerance.

Runs the full desk-scale suite, printing one pass/fail line per criterion
(visible with ``pytest -s`` or via ``renewal-lab suite``).  The two
particle-system criteria are the long poles (several minutes together).
"""

import os

import pytest

from renewal_lab import acceptance

_THREADS = max(1, int(os.environ.get("RENEWAL_LAB_THREADS", "2")))


@pytest.mark.parametrize("number", sorted(acceptance.CRITERIA))
def test_criterion(number):
    result = acceptance.CRITERIA[number](threads=_THREADS)
    status = "PASS" if result.passed else "FAIL"
    print(f"[{status}] criterion {result.number:2d} {result.name}: {result.detail} ({result.runtime:.1f}s)")
    assert result.passed, f"criterion {number} ({result.name}): {result.detail}"
