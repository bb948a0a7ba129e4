import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(4)


@pytest.fixture(scope="session")
def small_sim():
    """One simulated tiny corpus shared by read-only tests."""
    from helpers import make_simulated

    return make_simulated(seed=0)
