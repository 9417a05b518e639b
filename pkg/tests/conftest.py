import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tokenad import numerics as nx
from tokenad.backbone import ViTConfig
from tokenad.model import AnomalyModel, ModelConfig
from tokenad.sca import ScaConfig

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _fresh_tape():
    nx.reset_tape()
    yield
    nx.reset_tape()


def tiny_vit(**kw) -> ViTConfig:
    base = dict(image_size=16, patch_size=4, depth=2, dim=16, heads=2, tap_layers=(1, 2), seed=3)
    base.update(kw)
    return ViTConfig(**base)


def tiny_model(dtype=np.float64, sca=None, sca_enabled=True, saf_enabled=True, param_seed=5, **vit_kw) -> AnomalyModel:
    cfg = ModelConfig(tiny_vit(**vit_kw), sca or ScaConfig(m=2), sca_enabled=sca_enabled, saf_enabled=saf_enabled)
    return AnomalyModel.create(cfg, param_seed=param_seed, dtype=dtype)


def random_images(n: int, size: int = 16, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0, 1, size=(n, 3, size, size))


@pytest.fixture
def f64():
    with nx.precision(np.float64):
        yield
