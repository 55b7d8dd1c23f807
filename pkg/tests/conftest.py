"""Shared fixtures: tiny random models, an exactly-linear plant and cached trained models."""
from __future__ import annotations

import hashlib
import inspect
import json

import numpy as np
import pytest

from koopreach import koopman
from koopreach.dynamics import generate_dataset, linear_system, make_system
from koopreach.experiment import ExperimentConfig
from koopreach.koopman import KoopmanModel, MlpNetwork, identity_model

# Trained-model fixtures are smaller than the production default (3 x 128) so the
# whole suite stays within a desk-scale budget; see README for the full-size runs.
FIXTURE_CONFIGS = {
    "unicycle": dict(system="unicycle", horizon=100, hidden=(64, 64), epochs=20, n_train=200, seed=0),
    "planar_quad": dict(system="planar_quad", horizon=100, hidden=(64, 64), epochs=80, n_train=200,
                        lqr_r=10.0, seed=0),
}


def random_net(rng, sizes, activation="relu", bias_scale=0.5) -> MlpNetwork:
    """Random MLP with nonzero biases (zero biases put ReLU kinks on grid points)."""
    ws = [rng.normal(scale=1.0 / np.sqrt(i), size=(o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
    bs = [rng.normal(scale=bias_scale, size=o) for o in sizes[1:]]
    return MlpNetwork(ws, bs, activation)


def random_model(rng, n=2, m=1, l=3, hidden=(4,), activation="relu") -> KoopmanModel:
    enc = random_net(rng, [n, *hidden, l], activation)
    dec = random_net(rng, [l, *hidden, n], activation)
    K_A = np.eye(l) + 0.1 * rng.normal(size=(l, l))
    K_B = rng.normal(size=(l, m))
    return KoopmanModel(enc, dec, K_A, K_B)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def exact_linear():
    """A 3-state, 2-input plant that an identity-lifted Koopman model represents exactly."""
    A = np.array([[0.9, 0.1, 0.0], [0.0, 0.95, 0.1], [0.05, 0.0, 0.9]])
    B = np.array([[0.1, 0.0], [0.0, 0.1], [0.05, 0.05]])
    return linear_system(A, B, dt=0.1), identity_model(A, B)


def _cache_key(cfg: ExperimentConfig) -> str:
    src = inspect.getsource(koopman) + json.dumps(cfg.to_dict(), sort_keys=True)
    return hashlib.sha256(src.encode()).hexdigest()[:16]


def trained_model(request, name: str) -> tuple[ExperimentConfig, KoopmanModel]:
    cfg = ExperimentConfig(**FIXTURE_CONFIGS[name], output_dir="unused")
    cache_dir = request.config.cache.mkdir("koopreach-models")
    path = cache_dir / f"{name}-{_cache_key(cfg)}.json"
    if path.exists():
        return cfg, KoopmanModel.load(path)
    from koopreach.experiment import train_model

    model = train_model(cfg)
    model.save(path)
    return cfg, model


@pytest.fixture(scope="session")
def unicycle_model(request):
    return trained_model(request, "unicycle")


@pytest.fixture(scope="session")
def planar_model(request):
    return trained_model(request, "planar_quad")


@pytest.fixture(scope="session")
def unicycle_heldout():
    cfg = ExperimentConfig(**FIXTURE_CONFIGS["unicycle"], output_dir="unused")
    return generate_dataset(make_system("unicycle"), cfg.reference_config(seed=10_000), 50)
