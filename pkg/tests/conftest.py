import numpy as np
import pytest

from twoway_eb import build_graph

import reference


@pytest.fixture(scope="session")
def small_instance():
    """A connected 12 x 5 panel with model outcomes; shared by read-only tests."""
    rng = np.random.default_rng(20240811)
    panel, graph = reference.random_connected_panel(rng, r=12, c=5)
    theta = np.concatenate([rng.normal(0.0, 0.7, 12), rng.normal(0.0, 0.3, 5)])
    theta[12:] -= theta[12:].mean()
    y = reference.model_outcomes(rng, graph, theta, sigma2=0.12)
    return panel, graph, theta, y


@pytest.fixture()
def rng():
    return np.random.default_rng(7)
