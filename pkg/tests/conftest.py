import numpy as np
import pytest

from config import get_settings
from models import Dims, RunConfig, SpectrumSpec, Variant
from services.manifold import OrbitSpec
from services.operators import generate_instance
from services.rng import RngStream


@pytest.fixture(autouse=True)
def _fresh_settings(monkeypatch):
    """Settings are re-read per test so monkeypatched env vars take effect."""
    monkeypatch.setenv("APP_ENV", "testing")
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def rng():
    return RngStream(seed=12345)


def make_instance(variant, d=6, k=2, beta=1e4, seed=7, noiseless=False, L=None, p=None, spectrum=None):
    spectrum = spectrum or SpectrumSpec.geometric(k, 2.0, 1.0)
    if variant == Variant.SENSING and L is None:
        L = 400
    if variant == Variant.COMPLETION and p is None:
        p = 0.6
    return generate_instance(
        Dims(d=d, k=k), spectrum, variant, beta, RngStream(seed), L=L, p=p, noiseless=noiseless,
    )


@pytest.fixture(params=list(Variant), ids=lambda v: v.value)
def instance(request):
    return make_instance(request.param)


@pytest.fixture
def factorization_instance():
    return make_instance(Variant.FACTORIZATION, noiseless=True)


@pytest.fixture
def orbit(rng):
    x0 = rng.standard_normal((5, 2))
    return OrbitSpec(x0, 1)


@pytest.fixture
def run_config():
    return RunConfig(beta=100.0, h=1e-4, steps=200, thin=2, chains=2, seed=3)


@pytest.fixture
def instance_factory():
    return make_instance
