import pytest

from storeleak.config import default_presets


@pytest.fixture(scope="session")
def presets():
    return default_presets()


@pytest.fixture(scope="session")
def kabylake(presets):
    return presets.get_microarch("kabylake-r")


@pytest.fixture(scope="session")
def cache_geo(presets):
    return presets.get_cache("i7-4770")
