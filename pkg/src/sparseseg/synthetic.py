"""Small synthetic meshes for tests, demos and the toy end-to-end run."""

from __future__ import annotations

import numpy as np

from .scene import SceneMesh


def grid_mesh(nx: int = 10, ny: int = 10, spacing: float = 1.0, scene_id: str = "grid") -> SceneMesh:
    """Flat ``nx`` x ``ny`` vertex grid in the z=0 plane, two triangles per cell."""
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing, indexing="ij")
    verts = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)])
    faces = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a, b, c, d = i * ny + j, (i + 1) * ny + j, (i + 1) * ny + j + 1, i * ny + j + 1
            faces += [(a, b, c), (a, c, d)]
    return SceneMesh(verts, np.array(faces), scene_id=scene_id)


def icosahedron() -> tuple[np.ndarray, np.ndarray]:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
                  (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
                  (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)], dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array([(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
                  (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
                  (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
                  (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)])
    return v, f


def icosphere(subdivisions: int = 3, radius: float = 1.0, scene_id: str = "icosphere") -> SceneMesh:
    """Unit icosphere; ``subdivisions=4`` gives 2562 vertices."""
    v, f = icosahedron()
    verts = list(v)
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                p = verts[a] + verts[b]
                verts.append(p / np.linalg.norm(p))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = np.array(nf)
    return SceneMesh(np.array(verts) * radius, f, scene_id=scene_id)


def _plane_grid(origin, u, w, nu, nw):
    pts = np.array([origin + i * u + j * w for i in range(nu) for j in range(nw)])
    faces = []
    for i in range(nu - 1):
        for j in range(nw - 1):
            a, b, c, d = i * nw + j, (i + 1) * nw + j, (i + 1) * nw + j + 1, i * nw + j + 1
            faces += [(a, b, c), (a, c, d)]
    return pts, np.array(faces)


def three_plane_scene(n: int = 12, size: float = 2.0, seed: int = 0, color_noise: float = 25.0,
                      scene_id: str = "corner") -> SceneMesh:
    """A room corner: floor plus two walls meeting along shared edges.

    Vertex labels: 0 floor, 1 wall x=0, 2 wall y=0.  Class colors are close
    to each other so the geometry carries most of the signal.
    """
    rng = np.random.default_rng(seed)
    step = size / (n - 1)
    e = np.eye(3) * step
    parts = [
        (_plane_grid(np.zeros(3), e[0], e[1], n, n), 0),  # floor z=0
        (_plane_grid(np.zeros(3), e[1], e[2], n, n), 1),  # wall x=0
        (_plane_grid(np.zeros(3), e[0], e[2], n, n), 2),  # wall y=0
    ]
    verts, labels, faces = [], [], []
    index: dict[tuple, int] = {}
    for (pts, fcs), lab in parts:
        local = []
        for p in pts:
            key = tuple(np.round(p / step).astype(int))
            if key not in index:
                index[key] = len(verts)
                verts.append(p)
                labels.append(lab)
            local.append(index[key])
        local = np.array(local)
        faces.append(local[fcs])
    verts = np.array(verts)
    labels = np.array(labels)
    base = np.array([[140, 120, 100], [150, 140, 125], [130, 135, 140]], dtype=np.float64)
    colors = np.clip(base[labels] + rng.normal(0, color_noise, size=(len(verts), 3)), 0, 255)
    verts = verts + rng.normal(0, step * 0.02, size=verts.shape)
    return SceneMesh(verts, np.vstack(faces), colors, scene_id, labels)
