"""Synthetic shape generation: icospheres and smooth seeded deformations.

All randomness goes through numpy's PCG64 generator so that a seed fully
determines the output on any platform.
"""

from __future__ import annotations

import numpy as np

from .mesh import TriangleMesh, vertex_normals

__all__ = ["make_icosphere", "bump_field", "deform", "make_rng"]

_PHI = (1.0 + 5.0 ** 0.5) / 2.0

# Unit icosahedron with outward counter-clockwise winding.
_ICO_POSITIONS = np.array([
    [-1.0, _PHI, 0.0], [1.0, _PHI, 0.0], [-1.0, -_PHI, 0.0], [1.0, -_PHI, 0.0],
    [0.0, -1.0, _PHI], [0.0, 1.0, _PHI], [0.0, -1.0, -_PHI], [0.0, 1.0, -_PHI],
    [_PHI, 0.0, -1.0], [_PHI, 0.0, 1.0], [-_PHI, 0.0, -1.0], [-_PHI, 0.0, 1.0],
]) / np.sqrt(1.0 + _PHI * _PHI)

_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [5, 4, 9], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
], dtype=np.int64)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the single RNG used across the toolkit."""
    return np.random.Generator(np.random.PCG64(seed))


def make_icosphere(subdivisions: int) -> TriangleMesh:
    """Unit-radius icosphere with ``10 * 4**s + 2`` vertices.

    Each subdivision splits every triangle 1-to-4 at edge midpoints and
    projects new vertices back onto the unit sphere. Vertex and face
    order is deterministic.
    """
    if subdivisions < 0:
        raise ValueError("subdivisions must be non-negative")
    if subdivisions > 6:
        raise ValueError("subdivisions above 6 exceed desk scale")
    positions = [tuple(p) for p in _ICO_POSITIONS]
    faces = [tuple(int(i) for i in f) for f in _ICO_FACES]
    for _ in range(subdivisions):
        midpoint: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            idx = midpoint.get(key)
            if idx is None:
                p = np.asarray(positions[a]) + np.asarray(positions[b])
                p /= np.linalg.norm(p)
                idx = len(positions)
                positions.append(tuple(p))
                midpoint[key] = idx
            return idx

        next_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            next_faces.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
        faces = next_faces
    return TriangleMesh(positions, faces)


def bump_field(mesh: TriangleMesh, seed: int, amplitude: float, bumps: int = 8) -> np.ndarray:
    """Smooth per-vertex scalar displacement field with |field| <= amplitude.

    The field is a weighted sum of ``bumps`` low-frequency cosine lobes,
    each defined by a random axis, an integer frequency in 1..3, and a
    phase. Identical seeds yield bit-identical fields.
    """
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    n = mesh.vertex_count
    if amplitude == 0:
        return np.zeros(n)
    rng = make_rng(seed)
    axes = rng.normal(size=(bumps, 3))
    axes /= np.linalg.norm(axes, axis=1)[:, None]
    freqs = rng.integers(1, 4, size=bumps)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=bumps)
    weights = rng.uniform(-1.0, 1.0, size=bumps)
    radii = np.linalg.norm(mesh.positions, axis=1)
    radii[radii == 0] = 1.0
    unit = mesh.positions / radii[:, None]
    field = np.zeros(n)
    for k in range(bumps):
        angle = np.arccos(np.clip(unit @ axes[k], -1.0, 1.0))
        field += weights[k] * np.cos(freqs[k] * angle + phases[k])
    field *= amplitude / np.sum(np.abs(weights))
    return field


def deform(mesh: TriangleMesh, seed: int, amplitude: float) -> np.ndarray:
    """Deformed copy of the vertex positions (same topology).

    Displaces each vertex along its normal by a smooth seeded field.
    ``amplitude == 0`` returns the positions unchanged.
    """
    field = bump_field(mesh, seed, amplitude)
    if not field.any():
        return mesh.positions.copy()
    return mesh.positions + field[:, None] * vertex_normals(mesh)
