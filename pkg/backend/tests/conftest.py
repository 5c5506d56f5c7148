import socket

import numpy as np
import pytest

from meshtex_backend.config import ServiceConfig
from meshtex_backend.model import StandInPipeline
from meshtex_backend.server import Server


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture(scope="session")
def pipeline():
    return StandInPipeline()


@pytest.fixture(scope="session")
def server(pipeline):
    config = ServiceConfig(port=free_port(), health_port=free_port(), max_batch=4)
    srv = Server(config, pipeline)
    srv.start()
    yield srv
    srv.stop()


@pytest.fixture(scope="session")
def endpoint(server):
    return f"127.0.0.1:{server.config.port}"


@pytest.fixture
def rng():
    return np.random.default_rng(4321)


@pytest.fixture(scope="session")
def octahedron_obj(tmp_path_factory):
    """Small closed mesh with a per-face UV atlas, for integration runs."""
    verts = [
        (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1),
    ]
    faces = [
        (4, 0, 2), (4, 2, 1), (4, 1, 3), (4, 3, 0),
        (5, 2, 0), (5, 1, 2), (5, 3, 1), (5, 0, 3),
    ]
    path = tmp_path_factory.mktemp("meshes") / "octahedron.obj"
    with open(path, "w") as fh:
        for v in verts:
            fh.write(f"v {v[0]} {v[1]} {v[2]}\n")
        margin = 0.04
        corners = [(margin, margin), (1 / 3 - margin, margin), (margin, 1 / 3 - margin)]
        for f in range(len(faces)):
            row, col = divmod(f, 3)
            for u, v in corners:
                fh.write(f"vt {u + col / 3:.6f} {v + row / 3:.6f}\n")
        for f, (a, b, c) in enumerate(faces):
            t = 3 * f + 1
            fh.write(f"f {a + 1}/{t} {b + 1}/{t + 1} {c + 1}/{t + 2}\n")
    return path
