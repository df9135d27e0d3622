"""Mesh decimation, normals, geodesic/angular distances and their combination."""

from __future__ import annotations

import heapq
import logging
import struct
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from .scene import SceneMesh

log = logging.getLogger(__name__)

DEFAULT_DECIMATION_TARGET = 8000
DEFAULT_NORMAL_NEIGHBORS = 10
DEFAULT_DELTA = 0.6
COT_MIN, COT_MAX = 1e-6, 1e6


@dataclass(frozen=True, eq=False)
class DecimatedMesh:
    mesh: SceneMesh
    origin_map: np.ndarray
    exhausted: bool = False  # collapse candidates ran out before reaching the target


@dataclass(frozen=True, eq=False)
class NormalField:
    normals: np.ndarray
    degenerate: np.ndarray


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    values: np.ndarray
    kind: str  # "geodesic" | "angular" | "combined"
    delta: float = float("nan")
    time: float = float("nan")

    def __post_init__(self):
        if self.kind not in ("geodesic", "angular", "combined"):
            raise ValueError(f"unknown distance kind {self.kind!r}")
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("distance matrix must be square")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class HeatGeodesicConfig:
    time_scale: float = 1.0
    boundary: str = "average"  # "neumann" | "dirichlet" | "average" (only matters with boundary)

    def __post_init__(self):
        if not self.time_scale > 0:
            raise ValueError("time_scale must be positive")
        if self.boundary not in ("neumann", "dirichlet", "average"):
            raise ValueError(f"unknown boundary condition {self.boundary!r}")


@dataclass(frozen=True)
class CombinedDistanceConfig:
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if not 0 <= self.delta <= 1:
            raise ValueError("delta must lie in [0, 1]")


# ---------------------------------------------------------------------------
# basic mesh helpers


def unique_edges(faces: np.ndarray) -> np.ndarray:
    e = np.vstack([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def edge_lengths(mesh: SceneMesh) -> np.ndarray:
    e = unique_edges(mesh.faces)
    return np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)


def boundary_vertices(faces: np.ndarray, n: int) -> np.ndarray:
    e = np.vstack([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    mask = np.zeros(n, dtype=bool)
    mask[uniq[counts == 1].ravel()] = True
    return mask


def edge_graph(mesh: SceneMesh) -> sparse.csr_matrix:
    e = unique_edges(mesh.faces)
    w = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    n = mesh.num_vertices
    return sparse.coo_matrix((np.r_[w, w], (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])),
                             shape=(n, n)).tocsr()


def _require_connected(mesh: SceneMesh) -> None:
    if mesh.num_faces == 0:
        raise ValueError("mesh has no faces")
    ncomp, _ = csgraph.connected_components(edge_graph(mesh), directed=False)
    used = np.zeros(mesh.num_vertices, dtype=bool)
    used[mesh.faces.ravel()] = True
    ncomp -= int(np.sum(~used))  # isolated vertices are components too
    ncomp += int(np.any(~used))
    if ncomp != 1:
        raise ValueError(f"mesh is disconnected: {ncomp} components")


# ---------------------------------------------------------------------------
# quadric edge collapse


def _face_planes(v: np.ndarray, f: np.ndarray):
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    area2 = np.linalg.norm(n, axis=1)
    unit = n / np.where(area2 > 0, area2, 1.0)[:, None]
    d = -np.sum(unit * v[f[:, 0]], axis=1)
    return unit, d, area2 / 2.0


def _plane_quadric(normal, d, weight):
    p = np.append(normal, d)
    return weight * np.outer(p, p)


class _Collapser:
    """Garland-Heckbert edge collapse with link-condition and fold-over guards."""

    def __init__(self, mesh: SceneMesh, boundary_weight: float):
        self.v = mesh.vertices.copy()
        self.f = mesh.faces.copy()
        n = len(self.v)
        self.v_alive = np.ones(n, dtype=bool)
        self.f_alive = np.ones(len(self.f), dtype=bool)
        self.vfaces: list[set[int]] = [set() for _ in range(n)]
        for fi, tri in enumerate(self.f):
            for x in tri:
                self.vfaces[x].add(fi)
        self.version = np.zeros(n, dtype=np.int64)
        self.Q = np.zeros((n, 4, 4))
        unit, d, area = _face_planes(self.v, self.f)
        for fi, tri in enumerate(self.f):
            K = _plane_quadric(unit[fi], d[fi], max(area[fi], 1e-30))
            for x in tri:
                self.Q[x] += K
        # penalty planes perpendicular to boundary edges keep the outline in place
        edge_faces = defaultdict(list)
        for fi, tri in enumerate(self.f):
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                edge_faces[(min(a, b), max(a, b))].append(fi)
        for (a, b), fl in edge_faces.items():
            if len(fl) != 1:
                continue
            e = self.v[b] - self.v[a]
            pn = np.cross(e, unit[fl[0]])
            norm = np.linalg.norm(pn)
            if norm == 0:
                continue
            pn /= norm
            K = _plane_quadric(pn, -pn @ self.v[a], boundary_weight * float(e @ e))
            self.Q[a] += K
            self.Q[b] += K
        self.heap: list = []
        for a, b in edge_faces:
            self._push(a, b)

    def _neighbors(self, x: int) -> set[int]:
        out = set()
        for fi in self.vfaces[x]:
            out.update(self.f[fi].tolist())
        out.discard(x)
        return out

    def _target(self, a: int, b: int):
        Q = self.Q[a] + self.Q[b]
        A = Q[:3, :3]
        cands = [self.v[a], self.v[b], (self.v[a] + self.v[b]) / 2.0]
        if np.linalg.cond(A) < 1e10:
            cands.insert(0, np.linalg.solve(A, -Q[:3, 3]))
        best, best_cost = None, np.inf
        for p in cands:
            h = np.append(p, 1.0)
            c = float(h @ Q @ h)
            if c < best_cost - 1e-15:
                best, best_cost = p, c
        return max(best_cost, 0.0), best

    def _push(self, a: int, b: int):
        cost, pos = self._target(a, b)
        heapq.heappush(self.heap, (cost, a, b, int(self.version[a]), int(self.version[b]), pos))

    def _valid(self, a: int, b: int, pos: np.ndarray) -> bool:
        shared = [fi for fi in self.vfaces[a] if fi in self.vfaces[b]]
        if not shared:
            return False
        common = self._neighbors(a) & self._neighbors(b)
        if len(common) != len(shared):  # link condition
            return False
        if len(self._neighbors(a) | self._neighbors(b)) <= 3:
            return False  # would collapse a tetrahedron-like piece
        bnd_edge = len(shared) == 1
        if not bnd_edge and self._on_boundary(a) and self._on_boundary(b):
            return False
        for x in (a, b):
            for fi in self.vfaces[x]:
                if fi in shared:
                    continue
                tri = self.f[fi]
                old = self.v[tri]
                new = old.copy()
                new[tri == x] = pos
                n0 = np.cross(old[1] - old[0], old[2] - old[0])
                n1 = np.cross(new[1] - new[0], new[2] - new[0])
                l0, l1 = np.linalg.norm(n0), np.linalg.norm(n1)
                if l1 <= 1e-12 * max(l0, 1e-300) or n0 @ n1 <= 0.2 * l0 * l1:
                    return False
        return True

    def _on_boundary(self, x: int) -> bool:
        counts: dict[int, int] = defaultdict(int)
        for fi in self.vfaces[x]:
            for y in self.f[fi]:
                if y != x:
                    counts[int(y)] += 1
        return any(c == 1 for c in counts.values())

    def _collapse(self, a: int, b: int, pos: np.ndarray):
        for fi in list(self.vfaces[b]):
            tri = self.f[fi]
            if a in tri:
                self.f_alive[fi] = False
                for x in tri:
                    self.vfaces[x].discard(fi)
            else:
                tri[tri == b] = a
                self.vfaces[a].add(fi)
        self.vfaces[b] = set()
        self.v_alive[b] = False
        self.v[a] = pos
        self.Q[a] += self.Q[b]
        self.version[a] += 1
        self.version[b] += 1
        for y in self._neighbors(a):
            self._push(a, y)

    def run(self, target: int) -> bool:
        alive = int(self.v_alive.sum())
        while alive > target:
            if not self.heap:
                return True
            cost, a, b, va, vb, pos = heapq.heappop(self.heap)
            if not (self.v_alive[a] and self.v_alive[b]):
                continue
            if self.version[a] != va or self.version[b] != vb:
                continue
            if not self._valid(a, b, pos):
                continue
            self._collapse(a, b, pos)
            alive -= 1
        return False


def decimate_qem(mesh: SceneMesh, target: int = DEFAULT_DECIMATION_TARGET,
                 boundary_weight: float = 1e3) -> DecimatedMesh:
    """Quadric edge-collapse decimation down to at most ``target`` vertices.

    Each original vertex is mapped to its nearest surviving vertex.  If no
    legal collapse remains before the target is reached, the best mesh so
    far is returned with ``exhausted=True``.
    """
    if target < 4:
        raise ValueError("target must be >= 4")
    if mesh.num_faces == 0:
        raise ValueError("mesh has no faces")
    n = mesh.num_vertices
    if target >= n:
        return DecimatedMesh(mesh, np.arange(n, dtype=np.int64))
    c = _Collapser(mesh, boundary_weight)
    exhausted = c.run(target)
    if exhausted:
        log.warning("decimation stopped at %d vertices (target %d)", int(c.v_alive.sum()), target)
    keep = np.flatnonzero(c.v_alive)
    used = np.zeros(n, dtype=bool)
    used[c.f[c.f_alive].ravel()] = True
    keep = keep[used[keep]] if used[keep].any() else keep
    remap = -np.ones(n, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    faces = remap[c.f[c.f_alive]]
    colors = None
    if mesh.colors is not None:
        colors = mesh.colors[keep]
    labels = mesh.labels[keep] if mesh.labels is not None else None
    out = SceneMesh(c.v[keep], faces, colors, mesh.scene_id, labels)
    _, origin = cKDTree(out.vertices).query(mesh.vertices)
    return DecimatedMesh(out, np.asarray(origin, dtype=np.int64), exhausted)


# ---------------------------------------------------------------------------
# normals


def estimate_normals(mesh: SceneMesh | np.ndarray, k: int = DEFAULT_NORMAL_NEIGHBORS) -> NormalField:
    """PCA plane fit over each vertex and its ``k`` nearest neighbours.

    Neighbourhoods whose two largest variances are not both significant
    (colinear or coincident points) get a zero normal and a degenerate flag.
    """
    pts = mesh.vertices if isinstance(mesh, SceneMesh) else np.asarray(mesh, dtype=np.float64)
    n = len(pts)
    if n <= k:
        raise ValueError(f"need more than {k} points, got {n}")
    _, nbr = cKDTree(pts).query(pts, k=k + 1)
    nb = pts[nbr]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = (evals[:, 1] <= 1e-10 * scale) | (evals[:, 2] <= 0)
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    normals[degenerate] = 0.0
    return NormalField(normals, degenerate)


def angular_distance(n1, n2) -> float:
    n1, n2 = np.asarray(n1, dtype=np.float64), np.asarray(n2, dtype=np.float64)
    for nv in (n1, n2):
        if abs(np.linalg.norm(nv) - 1.0) > 1e-4:
            raise ValueError("normals must be unit length")
    return float(min(max(1.0 - abs(float(n1 @ n2)), 0.0), 1.0))


def angular_distance_matrix(normals: NormalField) -> DistanceMatrix:
    N = normals.normals
    D = 1.0 - np.abs(N @ N.T)
    np.clip(D, 0.0, 1.0, out=D)
    D[normals.degenerate, :] = 1.0
    D[:, normals.degenerate] = 1.0
    np.fill_diagonal(D, 0.0)
    return DistanceMatrix(D, "angular")


# ---------------------------------------------------------------------------
# geodesics


def _cotangents(v: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Cotangent of the angle at each corner, shape (F, 3)."""
    cots = np.empty((len(f), 3))
    for c in range(3):
        i, j, k = f[:, c], f[:, (c + 1) % 3], f[:, (c + 2) % 3]
        a, b = v[j] - v[i], v[k] - v[i]
        cross = np.linalg.norm(np.cross(a, b), axis=1)
        cots[:, c] = np.sum(a * b, axis=1) / np.maximum(cross, 1e-300)
    return np.clip(cots, -COT_MAX, COT_MAX)


def cotangent_laplacian(mesh: SceneMesh):
    """Positive semi-definite cotangent stiffness matrix and lumped vertex areas."""
    v, f = mesh.vertices, mesh.faces
    n = len(v)
    cots = _cotangents(v, f)
    rows, cols, vals = [], [], []
    for c in range(3):
        # the corner c is opposite edge (c+1, c+2)
        i, j = f[:, (c + 1) % 3], f[:, (c + 2) % 3]
        rows += [i, j]
        cols += [j, i]
        vals += [0.5 * cots[:, c]] * 2
    W = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n)).tocsr()
    W.sum_duplicates()
    W.data = np.clip(W.data, COT_MIN, COT_MAX)
    K = sparse.diags(np.asarray(W.sum(axis=1)).ravel()) - W
    area = 0.5 * np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)
    mass = np.bincount(f.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)
    return K.tocsc(), mass


class HeatSolver:
    """Prefactored heat-method geodesic solver (Crane et al. three-step scheme)."""

    def __init__(self, mesh: SceneMesh, cfg: HeatGeodesicConfig | None = None):
        cfg = cfg or HeatGeodesicConfig()
        _require_connected(mesh)
        self.mesh = mesh
        v, f = mesh.vertices, mesh.faces
        n = len(v)
        self.K, self.mass = cotangent_laplacian(mesh)
        h = float(np.mean(edge_lengths(mesh)))
        self.t = cfg.time_scale * h * h
        A = (sparse.diags(self.mass) + self.t * self.K).tocsc()
        self._neumann = splu(A)
        self._mode = cfg.boundary
        self._interior = self._dirichlet = None
        bnd = boundary_vertices(f, n)
        if bnd.any() and cfg.boundary != "neumann":
            self._interior = np.flatnonzero(~bnd)
            self._dirichlet = splu(A[self._interior][:, self._interior].tocsc())
        self._poisson = splu(self.K[1:, 1:].tocsc())

        normals = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        dbl_area = np.linalg.norm(normals, axis=1)
        normals = normals / np.maximum(dbl_area, 1e-300)[:, None]
        # gradient of a hat function: (N x e_opposite) / (2A)
        self._grad = []
        for c in range(3):
            j, k = f[:, (c + 1) % 3], f[:, (c + 2) % 3]
            self._grad.append(np.cross(normals, v[k] - v[j]) / np.maximum(dbl_area, 1e-300)[:, None])
        cots = _cotangents(v, f)
        # integrated divergence weights per corner
        self._div = []
        self._scatter = []
        for c in range(3):
            i, j, k = f[:, c], f[:, (c + 1) % 3], f[:, (c + 2) % 3]
            w = 0.5 * (cots[:, (c + 2) % 3, None] * (v[j] - v[i]) + cots[:, (c + 1) % 3, None] * (v[k] - v[i]))
            self._div.append(w)
            self._scatter.append(sparse.csr_matrix((np.ones(len(f)), (i, np.arange(len(f)))), shape=(n, len(f))))

    def _heat_solve(self, rhs: np.ndarray) -> np.ndarray:
        u = self._neumann.solve(rhs)
        if self._dirichlet is None:
            return u
        ud = np.zeros_like(rhs)
        ud[self._interior] = self._dirichlet.solve(rhs[self._interior])
        # the Dirichlet field of a boundary source is identically zero
        usable = np.any(rhs[self._interior] != 0, axis=0)
        if self._mode == "dirichlet":
            u[:, usable] = ud[:, usable]
        else:
            u[:, usable] = 0.5 * (u[:, usable] + ud[:, usable])
        return u

    def distances_from(self, sources: np.ndarray) -> np.ndarray:
        """Distance columns, shape (N, len(sources))."""
        sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
        f = self.mesh.faces
        n = self.mesh.num_vertices
        rhs = np.zeros((n, len(sources)))
        rhs[sources, np.arange(len(sources))] = 1.0
        u = self._heat_solve(rhs)
        g = sum(self._grad[c][:, None, :] * u[f[:, c]][:, :, None] for c in range(3))  # (F, B, 3)
        norm = np.linalg.norm(g, axis=2, keepdims=True)
        X = -g / np.where(norm > 0, norm, 1.0)
        div = sum(self._scatter[c] @ np.einsum("fbk,fk->fb", X, self._div[c]) for c in range(3))
        phi = np.zeros((n, len(sources)))
        phi[1:] = self._poisson.solve(-np.asarray(div)[1:])
        phi -= phi[sources, np.arange(len(sources))]
        return np.maximum(phi, 0.0)


def heat_geodesics(mesh: SceneMesh, cfg: HeatGeodesicConfig | None = None, chunk: int = 256) -> DistanceMatrix:
    solver = HeatSolver(mesh, cfg)
    n = mesh.num_vertices
    D = np.empty((n, n))
    for s in range(0, n, chunk):
        src = np.arange(s, min(s + chunk, n))
        D[:, src] = solver.distances_from(src)
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return DistanceMatrix(D, "geodesic", time=solver.t)


def dijkstra_geodesics(mesh: SceneMesh) -> DistanceMatrix:
    """Exact shortest paths along mesh edges (reference for the heat method)."""
    _require_connected(mesh)
    D = csgraph.dijkstra(edge_graph(mesh), directed=False)
    return DistanceMatrix(D, "geodesic")


def combined_distance_matrix(dg: DistanceMatrix, da: DistanceMatrix,
                             cfg: CombinedDistanceConfig | None = None) -> DistanceMatrix:
    """Blend mean-normalized geodesic and angular distances with weight ``delta``.

    Means are taken over off-diagonal entries.
    """
    cfg = cfg or CombinedDistanceConfig()
    if dg.values.shape != da.values.shape:
        raise ValueError("distance matrices differ in shape")
    n = len(dg)
    off = ~np.eye(n, dtype=bool)
    mg, ma = float(dg.values[off].mean()), float(da.values[off].mean())
    if mg <= 0 or ma <= 0:
        raise ValueError("cannot normalize an all-zero distance matrix")
    D = cfg.delta * (dg.values / mg) + (1.0 - cfg.delta) * (da.values / ma)
    np.fill_diagonal(D, 0.0)
    return DistanceMatrix(D, "combined", delta=cfg.delta, time=dg.time)


def combined_distance_for_mesh(mesh: SceneMesh, delta: float = DEFAULT_DELTA,
                               heat: HeatGeodesicConfig | None = None,
                               k: int = DEFAULT_NORMAL_NEIGHBORS) -> DistanceMatrix:
    dg = heat_geodesics(mesh, heat)
    da = angular_distance_matrix(estimate_normals(mesh, min(k, mesh.num_vertices - 1)))
    return combined_distance_matrix(dg, da, CombinedDistanceConfig(delta))


# ---------------------------------------------------------------------------
# cache file

_CACHE_MAGIC = b"VBDM"
_KINDS = ("geodesic", "angular", "combined")


def save_distance_cache(D: DistanceMatrix, path) -> None:
    """Header (magic, N, kind, delta, t) followed by float32 row-major values."""
    head = _CACHE_MAGIC + struct.pack("<IBdd", len(D), _KINDS.index(D.kind), D.delta, D.time)
    Path(path).write_bytes(head + np.ascontiguousarray(D.values, dtype="<f4").tobytes())


def load_distance_cache(path) -> DistanceMatrix:
    data = Path(path).read_bytes()
    if data[:4] != _CACHE_MAGIC:
        raise ValueError("not a distance cache file")
    n, kind, delta, t = struct.unpack_from("<IBdd", data, 4)
    off = 4 + struct.calcsize("<IBdd")
    if len(data) != off + 4 * n * n:
        raise ValueError("distance cache size does not match header")
    vals = np.frombuffer(data, "<f4", n * n, off).reshape(n, n).astype(np.float64)
    return DistanceMatrix(vals, _KINDS[kind], delta, t)
