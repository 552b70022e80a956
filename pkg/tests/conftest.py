import os

import pytest
from hypothesis import HealthCheck, settings

from pktsig.synth import TraceProfile, arlo_profile, generate, tplink_dense_profile, tplink_profile

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=300,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

PROFILES = os.path.join(os.path.dirname(__file__), os.pardir, "profiles")


@pytest.fixture(scope="session")
def tplink_trace():
    """Fast TP-Link-like trace: 50 ON + 50 OFF events with background chatter."""
    return generate(TraceProfile.load(os.path.join(PROFILES, "tplink-fast.json")), seed=2)


@pytest.fixture(scope="session")
def arlo_trace():
    return generate(TraceProfile.load(os.path.join(PROFILES, "arlo-fast.json")), seed=3)


@pytest.fixture(scope="session")
def quiet_tplink_trace():
    return generate(tplink_profile(10, 2.0, 0.5), seed=5)


@pytest.fixture(scope="session")
def quiet_arlo_trace():
    return generate(arlo_profile(10, 4.0, 1.5), seed=5)


@pytest.fixture(scope="session")
def dense_trace():
    """100 TP-Link events under ~50 exchanges/s of unrelated chatter."""
    return generate(tplink_dense_profile(), seed=1)
