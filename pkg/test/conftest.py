# Copyright 2024 Nicko van Someren
# SPDX: MIT
# See LICENSE.md for the full license text.

"""Test fixtures: small scenes with known geometry"""
import json

import numpy as np
import pytest

from rfit.geometry import Material, Mesh, Scene, SceneParams
from rfit.radar import RadarConfig

F0 = 77e9
BANDWIDTH = 4e9
CHIRP = 40e-6


def rectangle(corner, edge_a, edge_b, material=0):
    """Two-triangle rectangle; the diagonal runs from ``corner`` to the opposite corner"""
    corner = np.asarray(corner, dtype=float)
    a = np.asarray(edge_a, dtype=float)
    b = np.asarray(edge_b, dtype=float)
    vertices = [corner, corner + a, corner + a + b, corner + b]
    return Mesh(vertices, [[0, 1, 2], [0, 2, 3]], [material, material])


def unit_cube():
    """Closed unit cube [0, 1]^3 with outward winding"""
    vertices = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]]
    triangles = [[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
                 [0, 1, 5], [0, 5, 4], [1, 2, 6], [1, 6, 5],
                 [2, 3, 7], [2, 7, 6], [3, 0, 4], [3, 4, 7]]
    return Mesh(vertices, triangles)


def mesh_json(mesh):
    """Inline mesh section of a scene file"""
    return {"vertices": mesh.vertices.tolist(), "triangles": mesh.triangles.tolist(),
            "material_ids": mesh.material_ids.tolist()}


@pytest.fixture
def radar():
    return RadarConfig(F0, BANDWIDTH, CHIRP, 256, n_bins=128)


@pytest.fixture
def metal():
    return (Material("metal", 0.9),)


@pytest.fixture
def plate_scene(metal):
    """Monostatic radar at the origin facing a plate 2 m away along +z"""
    plate = rectangle([-0.5, -0.4, 2.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    return Scene(plate, SceneParams(), metal, [0, 0, 0], [[0, 0, 0]], F0)


@pytest.fixture
def corner_scene(metal):
    """A floor-like target plate at z=1.5 and a static wall at x=1 forming a dihedral"""
    floor = rectangle([-2.0, -1.0, 1.5], [4.0, 0.0, 0.0], [0.0, 2.0, 0.0])
    wall = rectangle([1.0, -1.0, -0.5], [0.0, 2.0, 0.0], [0.0, 0.0, 1.9])
    return Scene(floor, SceneParams(), metal, [0, 0, 0], [[0.2, 0, 0]], F0, static_meshes=[wall])


@pytest.fixture
def occlusion_scene(metal):
    """Bistatic line of sight along x with a plate whose lower edge sits 2 mm above it"""
    plate = rectangle([1.0, -0.5, 0.002], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0])
    return Scene(plate, SceneParams(), metal, [0, 0, 0], [[2.0, 0, 0]], F0)


@pytest.fixture
def empty_scene(metal):
    """Free space: no triangles at all"""
    return Scene(Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int)), SceneParams(), metal,
                 [0, 0, 0], [[3.0, 0, 0]], F0)


@pytest.fixture
def scene_document():
    """A JSON scene description of the monostatic plate"""
    plate = rectangle([-0.5, -0.4, 2.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    return {
        "mesh": mesh_json(plate),
        "materials": [{"name": "metal", "reflection_coefficient": 0.9}],
        "params": {"translation": [0, 0, 0], "rotation": [0, 0, 0], "scale": 1.0},
        "radar": {"f0": F0, "bandwidth": BANDWIDTH, "chirp_duration": CHIRP,
                  "n_samples": 256, "n_bins": 128},
        "array": {"tx": [0, 0, 0], "rx": [[0, 0, 0]]},
        "loss": {"normalize": True},
    }


@pytest.fixture
def write_scene(tmp_path):
    """Write a scene document and return its path"""
    def write(document, name="scene.json"):
        path = tmp_path / name
        path.write_text(json.dumps(document, indent=2), encoding="utf-8")
        return path
    return write
