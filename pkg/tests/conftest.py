"""Shared fixtures: small meshes and cheap experiment configurations"""

import numpy as np
import pytest

from src.core.models import DomainSpec, ExperimentConfig
from src.services.mesh import Mesh, build_structured


@pytest.fixture
def unit_square() -> Mesh:
    """Unit square split along its (0,0)-(1,1) diagonal"""
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    triangles = np.array([[0, 1, 2], [0, 2, 3]])
    spec = DomainSpec(xmin=0.0, xmax=1.0, ymin=0.0, ymax=1.0)
    return Mesh.from_arrays(nodes, triangles, domain=spec)


@pytest.fixture
def grid_mesh() -> Mesh:
    return build_structured(DomainSpec(), 0.25)


@pytest.fixture
def jittered_mesh() -> Mesh:
    return build_structured(DomainSpec(), 0.2, jitter=0.25, seed=7)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def quick_config(tmp_path) -> ExperimentConfig:
    """Coarse shear experiment that runs in about a second"""
    return ExperimentConfig(
        phantom="disc", model="shear", n_loads=2, h_forward=0.1, h_inverse=0.2,
        eps_tv=[1e-4], eps_elas=1e-5, noise=0.0, seed=3, max_iter=300,
        output_dir=str(tmp_path / "run"),
    )
