"""Hand-built reference meshes shared across test modules."""

import numpy as np

from shapemetrics.geometry import TriMesh

# Unit cube [0,1]^3, 12 outward-CCW triangles; volume 1, area 6.
_CUBE_VERTS = np.array(
    [
        [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
        [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
    ],
    dtype=np.float64,
)
_CUBE_FACES = np.array(
    [
        [0, 2, 1], [0, 3, 2],  # bottom (z=0)
        [4, 5, 6], [4, 6, 7],  # top (z=1)
        [0, 1, 5], [0, 5, 4],  # front (y=0)
        [3, 7, 6], [3, 6, 2],  # back (y=1)
        [0, 4, 7], [0, 7, 3],  # left (x=0)
        [1, 2, 6], [1, 6, 5],  # right (x=1)
    ],
    dtype=np.int64,
)


def unit_cube() -> TriMesh:
    return TriMesh(_CUBE_VERTS.copy(), _CUBE_FACES.copy(), name="cube")


def tetrahedron() -> TriMesh:
    """Right tetra (0,0,0),(1,0,0),(0,1,0),(0,0,1); V=1/6, A=1.5+sqrt(3)/2."""
    v = np.array(
        [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64
    )
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]], dtype=np.int64)
    return TriMesh(v, f, name="tetra")


def scaled(mesh: TriMesh, s: float) -> TriMesh:
    return TriMesh(mesh.vertices * s, mesh.faces.copy(), name=mesh.name)


def translated(mesh: TriMesh, offset) -> TriMesh:
    return TriMesh(
        mesh.vertices + np.asarray(offset, dtype=np.float64),
        mesh.faces.copy(),
        name=mesh.name,
    )
