import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cglmha import kernels

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


BACKENDS = ["python"] + (["compiled"] if kernels.compiled_available() else [])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run the test once per available recurrent-kernel backend."""
    monkeypatch.setattr(kernels, "backend", kernels.get_backend(request.param))
    return request.param
