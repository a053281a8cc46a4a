"""The nine acceptance criteria, each at its stated tolerance and runtime limit.

Every criterion prints one [PASS]/[FAIL] line, visible even when pytest
captures output.
"""

import pytest

from depad.acceptance import CRITERIA, run_criterion


@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"criterion_{c.number}" for c in CRITERIA])
def test_criterion(criterion, capsys):
    result = run_criterion(criterion)
    with capsys.disabled():
        print("\n" + result.line())
    assert result.passed, result.detail


def test_injected_failure_is_reported():
    result = run_criterion(CRITERIA[1], corrupt=True)
    assert not result.passed and result.line().startswith("[FAIL] 2.")
