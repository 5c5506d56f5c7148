import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from meshes import cube, fullscreen_quad, icosphere, write_obj  # noqa: E402

from meshtex.geometry import Camera, normalize_mesh  # noqa: E402


@pytest.fixture(scope="session")
def sphere_mesh():
    return normalize_mesh(icosphere(2))


@pytest.fixture(scope="session")
def cube_mesh():
    return normalize_mesh(cube())


@pytest.fixture(scope="session")
def quad_obj(tmp_path_factory):
    path = tmp_path_factory.mktemp("meshes") / "quad.obj"
    cam = Camera(0, 0, 2.0, 45.0, 64)
    write_obj(path, fullscreen_quad(cam))
    return path


@pytest.fixture(scope="session")
def sphere_obj(tmp_path_factory):
    path = tmp_path_factory.mktemp("meshes") / "sphere.obj"
    write_obj(path, icosphere(2))
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
