import math

import numpy as np
import pytest

from srrr.simulation import generate, make_scenario


@pytest.fixture
def planted_noiseless():
    """Small exact-rank dataset: Y = X C with a rank-2 planted C."""
    scenario = make_scenario(n=60, p=13, q=8, r=2, rho_noise=0.3, snr=math.inf, seed=5)
    data = generate(scenario)
    return data


@pytest.fixture
def planted_noisy():
    """Small noisy dataset at the study's signal-to-noise level."""
    scenario = make_scenario(n=80, p=13, q=8, r=2, rho_noise=0.3, snr=0.5, seed=6)
    return generate(scenario)
