import sys
from pathlib import Path

import pytest

from osteograde import autodiff as ad

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(autouse=True, scope="session")
def finite_checks_everywhere():
    """Run the whole suite with NaN/Inf detection on every op output."""
    ad.set_finite_checks(True)
    yield
    ad.set_finite_checks(False)
