"""Shared fixtures for the latent accelerator test suite."""

import logging

import numpy as np
import pytest

from latent_accel.net import PseudoInvertibleNet, build_net
from latent_accel.systems import decay_system, linear_system, vortex_system

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def linear():
    return linear_system()


@pytest.fixture
def decay():
    return decay_system()


@pytest.fixture
def vortex():
    return vortex_system()


@pytest.fixture
def identity_net():
    """n=3, m=6 net with A = [I; 0] and an identity coupling stack."""
    return PseudoInvertibleNet(3, 6, n_layers=2, hidden_width=4, depth=1)


@pytest.fixture
def small_net(rng):
    """Non-trivial n=3, m=6 net: random lift rows and coupling outputs."""
    return build_net(3, 6, n_layers=2, hidden_width=5, depth=2, rng=rng,
                     lift_std=0.3, output_scale=0.2)


def make_net_with_lift(A: np.ndarray, n_layers: int = 2) -> PseudoInvertibleNet:
    """Identity coupling stack with a given lift matrix."""
    m, n = A.shape
    net = PseudoInvertibleNet(n, m, n_layers=n_layers, hidden_width=3, depth=1)
    theta = net.theta.copy()
    net.layout.views(theta)["A"][...] = A
    net.set_parameters(theta)
    return net


@pytest.fixture
def net_with_lift():
    return make_net_with_lift
