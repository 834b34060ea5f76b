"""Procedural part-labeled meshes used by tests, examples and the CLI demo."""

from __future__ import annotations

import numpy as np

from .mesh import PartitionedMesh, normalize_mesh


def cube(size: float = 1.0, center=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    h = size / 2
    v = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)], dtype=np.float64)
    # outward winding, two triangles per side
    f = np.array(
        [
            [0, 1, 3], [0, 3, 2],  # -x
            [4, 6, 7], [4, 7, 5],  # +x
            [0, 4, 5], [0, 5, 1],  # -y
            [2, 3, 7], [2, 7, 6],  # +y
            [0, 2, 6], [0, 6, 4],  # -z
            [1, 5, 7], [1, 7, 3],  # +z
        ],
        dtype=np.int64,
    )
    return v + np.asarray(center), f


def uv_sphere(radius: float = 1.0, center=(0.0, 0.0, 0.0), n_lat: int = 12, n_lon: int = 24):
    verts = [[0.0, radius, 0.0]]
    for i in range(1, n_lat):
        theta = np.pi * i / n_lat
        for j in range(n_lon):
            phi = 2 * np.pi * j / n_lon
            verts.append([radius * np.sin(theta) * np.sin(phi), radius * np.cos(theta), radius * np.sin(theta) * np.cos(phi)])
    verts.append([0.0, -radius, 0.0])
    v = np.asarray(verts) + np.asarray(center)
    faces = []
    ring = lambda i, j: 1 + (i - 1) * n_lon + (j % n_lon)  # noqa: E731
    for j in range(n_lon):
        faces.append([0, ring(1, j), ring(1, j + 1)])
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b, c, d = ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1)
            faces += [[a, c, d], [a, d, b]]
    south = len(v) - 1
    for j in range(n_lon):
        faces.append([south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)])
    return v, np.asarray(faces, dtype=np.int64)


def frustum(r_bottom, r_top, y0, y1, n: int = 24, cap_bottom=True, cap_top=True, hole_top: float = 0.0):
    """Vertical truncated cone; ``hole_top`` > 0 leaves a round opening in the top cap."""
    ang = 2 * np.pi * np.arange(n) / n
    ring = lambda r, y: np.stack([r * np.sin(ang), np.full(n, y), r * np.cos(ang)], axis=1)  # noqa: E731
    verts = [ring(r_bottom, y0), ring(r_top, y1)]
    faces = []
    for j in range(n):
        k = (j + 1) % n
        faces += [[j, k, n + k], [j, n + k, n + j]]
    base = 2 * n
    if cap_bottom:
        verts.append(np.array([[0.0, y0, 0.0]]))
        faces += [[base, (j + 1) % n, j] for j in range(n)]
        base += 1
    if cap_top:
        if hole_top > 0:
            verts.append(ring(hole_top, y1))
            for j in range(n):
                k = (j + 1) % n
                faces += [[n + j, n + k, base + k], [n + j, base + k, base + j]]
        else:
            verts.append(np.array([[0.0, y1, 0.0]]))
            faces += [[base, n + j, n + (j + 1) % n] for j in range(n)]
    return np.concatenate(verts), np.asarray(faces, dtype=np.int64)


def assemble(parts: dict[str, tuple[np.ndarray, np.ndarray]], synonyms=None, normalize: bool = True) -> PartitionedMesh:
    """Concatenate disjoint components, one part each."""
    verts, faces, labels = [], [], []
    offset = 0
    for i, (v, f) in enumerate(parts.values()):
        verts.append(v)
        faces.append(f + offset)
        labels.append(np.full(len(f), i))
        offset += len(v)
    mesh = PartitionedMesh(np.concatenate(verts), np.concatenate(faces), list(parts), np.concatenate(labels), synonyms or {})
    return normalize_mesh(mesh) if normalize else mesh


def unit_cube_mesh() -> PartitionedMesh:
    v, f = cube(2.0)
    return PartitionedMesh(v, f, ["body"], np.zeros(len(f), dtype=np.int64))


def two_spheres(gap: float = 0.2, n_lat: int = 12, n_lon: int = 24, names=("head", "tail")) -> PartitionedMesh:
    """Two equal spheres side by side along x: part 0 on the left (-x)."""
    r = 1.0
    c = r + gap / 2
    return assemble(
        {
            names[0]: uv_sphere(r, (-c, 0, 0), n_lat, n_lon),
            names[1]: uv_sphere(r, (c, 0, 0), n_lat, n_lon),
        }
    )


def body_handle(n_lat: int = 10, n_lon: int = 20) -> PartitionedMesh:
    """A large "body" sphere with a smaller "handle" sphere attached on +x."""
    return assemble(
        {
            "body": uv_sphere(1.0, (-0.35, 0, 0), n_lat, n_lon),
            "handle": uv_sphere(0.6, (1.15, 0, 0), n_lat, n_lon),
        },
        synonyms={"handle": ["grip", "holder"]},
    )


def lamp(n: int = 24, tube_radius: float = 0.09, hole: float = 0.02) -> PartitionedMesh:
    """Base disk, thin vertical tube and a shade whose top has a small opening over the tube."""
    return assemble(
        {
            "base": frustum(0.55, 0.55, 0.0, 0.1, n),
            "tube": frustum(tube_radius, tube_radius, 0.1, 0.95, n),
            "shade": frustum(0.5, 0.3, 0.75, 1.2, n, cap_bottom=False, hole_top=hole),
        },
        synonyms={"tube": ["pole", "stem"], "shade": ["lampshade"]},
    )


def enclosed_core() -> PartitionedMesh:
    """A "core" cube hidden inside a closed "shell" sphere."""
    return assemble({"shell": uv_sphere(1.0, n_lat=10, n_lon=20), "core": cube(0.3)})
