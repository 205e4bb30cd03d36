import json
from pathlib import Path

import numpy as np
import pytest

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def calibration() -> dict:
    """Frozen margins produced once by scripts/calibrate_fixtures.py."""
    path = FIXTURES / "calibration.json"
    if not path.is_file():
        pytest.fail("missing tests/fixtures/calibration.json; run scripts/calibrate_fixtures.py")
    return json.loads(path.read_text())


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
