import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("sim", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("sim")


@pytest.fixture
def tmp_out(tmp_path):
    return tmp_path / "out"
