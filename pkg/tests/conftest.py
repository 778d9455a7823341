import sys
from pathlib import Path

import numpy as np
import pytest

PROJECT_ROOT = Path(__file__).resolve().parents[1]

if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator so every randomized property test is reproducible."""
    return np.random.default_rng(20240611)


@pytest.fixture
def tiny_cfg():
    from engine.varnet import ModelConfig

    return ModelConfig(depth=2, d=8, heads=2, d_ff=16, vocab=16, seed=3, temperature=1.0)
