import numpy as np
import pytest
import torch

from facedet3d import synthdata as sd
from facedet3d.facegeom import BlendshapeModel, Camera, FaceMesh


@pytest.fixture(scope="session")
def toy_model():
    return BlendshapeModel.toy(seed=0)


@pytest.fixture(scope="session")
def small_samples():
    """Two training identities and one held-out identity, two expressions each."""
    return sd.generate_samples(2, 2, 0, n_heldout=1)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def grid_mesh(n=5, z=0.0, size=1.0):
    """Flat counter-clockwise grid in the plane z=const, uv spanning [0, 1]^2."""
    t = np.linspace(0.0, 1.0, n)
    uu, vv = np.meshgrid(t, t)
    verts = np.stack([size * (uu - 0.5), size * (0.5 - vv), np.full_like(uu, z)], -1).reshape(-1, 3)
    faces = []
    for i in range(n - 1):
        for j in range(n - 1):
            a, b, c, d = i * n + j, (i + 1) * n + j, i * n + j + 1, (i + 1) * n + j + 1
            faces += [(a, b, c), (b, d, c)]
    return FaceMesh(verts, np.array(faces), np.stack([uu, vv], -1).reshape(-1, 2))


def front_camera(size=8, distance=3.0, fov=0.6):
    return Camera((0.0, 0.0, distance), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), fov, size, size)
