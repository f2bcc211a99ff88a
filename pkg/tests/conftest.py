"""Shared small fixtures: a handful of identities, pairs and quickly trained encoders."""
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from robsuite.dataset import make_pairs, make_prototypes, make_triplets
from robsuite.siamese import ArchDescriptor, TrainConfig, calibrate_threshold, clean_accuracy, train

settings.register_profile("robsuite", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("robsuite")

SIDE = 16


@pytest.fixture(scope="session")
def identities():
    return make_prototypes(8, SIDE, 3)


@pytest.fixture(scope="session")
def pairs(identities):
    return make_pairs(identities, 96, 0.5, 0.05, 11)


def _trained(identities, pairs, arch, seed):
    hyper = TrainConfig(epochs=8, triplets=768, seed=seed)
    sys = train(arch, make_triplets(identities, hyper.triplets, hyper.data_sigma, seed), hyper, side=SIDE)
    sys = replace(sys, kappa=calibrate_threshold(sys, pairs), system_id=f"T{seed}")
    return replace(sys, accuracy=clean_accuracy(sys, pairs))


@pytest.fixture(scope="session")
def system(identities, pairs):
    return _trained(identities, pairs, ArchDescriptor(1, (48, 16), "relu"), 1)


@pytest.fixture(scope="session")
def zoo(identities, pairs, system):
    """Four small encoders with different inductive biases."""
    others = [ArchDescriptor(3, (48, 16), "tanh", 1.0, 0.1), ArchDescriptor(5, (32, 16), "relu", 1.0, 0.2),
              ArchDescriptor(1, (32, 32, 16), "tanh")]
    return [system] + [_trained(identities, pairs, a, 2 + i) for i, a in enumerate(others)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
