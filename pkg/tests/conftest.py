import json

import numpy as np
import pytest

from raysample.mesh import write_obj

# Acceptance outcomes collected during the run and echoed in the summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical check")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def unit_cube_mesh():
    """Closed cube [-0.5, 0.5]^3, outward triangles."""
    v = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    # vertex index = 4*ix + 2*iy + iz
    quads = [
        (0, 1, 3, 2),  # x = -0.5
        (4, 6, 7, 5),  # x = +0.5
        (0, 4, 5, 1),  # y = -0.5
        (2, 3, 7, 6),  # y = +0.5
        (0, 2, 6, 4),  # z = -0.5
        (1, 5, 7, 3),  # z = +0.5
    ]
    f = []
    for a, b, c, d in quads:
        f += [(a, b, c), (a, c, d)]
    return v.astype(float), np.array(f)


@pytest.fixture
def cube_obj(tmp_path):
    path = tmp_path / "cube.obj"
    write_obj(path, *unit_cube_mesh())
    return path


@pytest.fixture
def scene_dir(tmp_path):
    """Scene files used by the CLI tests."""
    scenes = {
        "sphere.json": {"op": "sphere", "args": {"radius": 0.5}},
        "cube.json": {"op": "box", "args": {"half_extents": [1, 1, 1]}},
        "torus.json": {"op": "torus", "args": {"major_radius": 0.5, "minor_radius": 0.2}},
        "sail.json": {"op": "absolute", "args": {"child": {"op": "plane", "args": {"normal": [0, 0, 1]}}}},
        "empty.json": {"op": "constant", "args": {"value": 1.0}},
    }
    for name, doc in scenes.items():
        (tmp_path / name).write_text(json.dumps(doc))
    return tmp_path
