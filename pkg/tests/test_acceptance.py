"""The twelve acceptance criteria at full scale.

Each criterion prints one PASS/FAIL line; the lines are repeated in the
terminal summary so they are visible without ``-s``.
"""
import pytest

from relaxed_fbsde.acceptance import CRITERIA, AcceptanceConfig

CONFIG = AcceptanceConfig()
RESULTS: list = []


@pytest.mark.acceptance
@pytest.mark.parametrize("number", sorted(CRITERIA), ids=lambda n: f"criterion_{n:02d}_{CRITERIA[n].__name__}")
def test_criterion(number):
    result = CRITERIA[number](CONFIG)
    line = result.line()
    RESULTS.append(line)
    print(line)
    assert result.passed, line
