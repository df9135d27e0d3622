"""Spectral embedding of a mesh distance matrix and seeded k-means.

The pipeline: exponential kernel, symmetric degree normalization, top-k
eigenvectors (Lanczos), row normalization, then Lloyd iterations started
from the embeddings of labeled vertices.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    DEFAULT_DECIMATION_TARGET,
    DEFAULT_DELTA,
    DecimatedMesh,
    DistanceMatrix,
    HeatGeodesicConfig,
    combined_distance_for_mesh,
    decimate_qem,
)
from .scene import SceneMesh

log = logging.getLogger(__name__)

DEFAULT_EMBEDDING_LENGTH = 50
KMEANS_MAX_ITER = 300


class EigenError(RuntimeError):
    def __init__(self, message: str, residuals: np.ndarray):
        super().__init__(f"{message}; residuals={np.array2string(residuals, precision=3)}")
        self.residuals = residuals


@dataclass(frozen=True)
class AffinityConfig:
    sigma: float = 1.0
    auto_sigma: bool = True
    embedding_length: int = DEFAULT_EMBEDDING_LENGTH

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.embedding_length < 1:
            raise ValueError("embedding_length must be >= 1")


@dataclass(frozen=True, eq=False)
class SpectralEmbedding:
    rows: np.ndarray
    eigenvalues: np.ndarray
    zero_rows: np.ndarray


@dataclass(frozen=True, eq=False)
class ClusterResult:
    assignment: np.ndarray
    center_distance: np.ndarray
    seeds: np.ndarray
    centers: np.ndarray
    iterations: int
    objective_trace: list = field(default_factory=list)


def build_normalized_affinity(D: DistanceMatrix | np.ndarray, cfg: AffinityConfig | None = None) -> np.ndarray:
    """``W^-1/2 Z W^-1/2`` with ``Z = exp(-D / 2 sigma^2)`` and ``W`` the column sums of ``Z``.

    With ``auto_sigma`` the smoothing is the mean over all N^2 entries of D,
    diagonal included.
    """
    cfg = cfg or AffinityConfig()
    D = D.values if isinstance(D, DistanceMatrix) else np.asarray(D, dtype=np.float64)
    sigma = float(D.mean()) if cfg.auto_sigma else cfg.sigma
    if not sigma > 0:
        raise ValueError("smoothing sigma must be positive")
    Z = np.exp(-D / (2.0 * sigma * sigma))
    w = Z.sum(axis=0)
    if np.any(w <= 0):
        raise ValueError("zero column sum in affinity kernel")
    s = 1.0 / np.sqrt(w)
    A = Z * s[:, None] * s[None, :]
    return 0.5 * (A + A.T)


def _orthogonalize(q: np.ndarray, Q: np.ndarray) -> np.ndarray:
    # two passes of classical Gram-Schmidt
    for _ in range(2):
        q = q - Q @ (Q.T @ q)
    return q


def top_k_eigenvectors(A, k: int, tol: float = 1e-8, seed: int = 0,
                       initial_steps: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Largest ``k`` eigenpairs of a symmetric matrix by Lanczos with full reorthogonalization.

    The Krylov basis grows (doubling) until every returned pair satisfies
    ``||A v - lambda v|| <= tol * ||A||``.  Invariant subspaces are escaped by
    restarting from a fresh random direction, which is what makes repeated
    eigenvalues come out right.
    """
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("matrix must be square")
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    m_target = min(n, initial_steps or max(2 * k + 1, k + 20))
    Q = np.zeros((n, 0))
    alpha: list[float] = []
    beta: list[float] = []  # beta[j] couples q_j and q_{j+1}
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    while True:
        while Q.shape[1] < m_target:
            Q = np.column_stack([Q, q])
            w = A @ q
            a = float(q @ w)
            alpha.append(a)
            w = _orthogonalize(w, Q)
            b = float(np.linalg.norm(w))
            if Q.shape[1] == n:
                break
            scale = max(abs(a), max(np.abs(alpha)), 1e-300)
            if b <= 1e-12 * scale:
                # invariant subspace found: continue from a new random direction
                beta.append(0.0)
                q = _orthogonalize(rng.standard_normal(n), Q)
                q /= np.linalg.norm(q)
            else:
                beta.append(b)
                q = w / b
        m = Q.shape[1]
        T = np.diag(alpha) + np.diag(beta[: m - 1], 1) + np.diag(beta[: m - 1], -1)
        theta, S = np.linalg.eigh(T)
        order = np.argsort(theta)[::-1][:k]
        vals, vecs = theta[order], Q @ S[:, order]
        anorm = max(float(np.max(np.abs(theta))), 1e-300)
        resid = np.linalg.norm(A @ vecs - vecs * vals, axis=0)
        if len(vals) == k and np.all(resid <= tol * anorm):
            return vals, vecs
        if m >= n:
            raise EigenError("Lanczos did not converge with a full Krylov basis", resid)
        m_target = min(n, 2 * m)


def spectral_embed(A: np.ndarray, cfg: AffinityConfig | None = None) -> SpectralEmbedding:
    cfg = cfg or AffinityConfig()
    k = min(cfg.embedding_length, A.shape[0])
    vals, vecs = top_k_eigenvectors(A, k)
    norms = np.linalg.norm(vecs, axis=1)
    zero = norms < 1e-12
    rows = np.zeros_like(vecs)
    rows[~zero] = vecs[~zero] / norms[~zero, None]
    return SpectralEmbedding(rows, vals, zero)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = np.sum(X * X, axis=1)[:, None] - 2.0 * X @ C.T + np.sum(C * C, axis=1)[None, :]
    return np.maximum(d, 0.0)


def seeded_kmeans(emb: SpectralEmbedding | np.ndarray, seeds, max_iter: int = KMEANS_MAX_ITER) -> ClusterResult:
    """Lloyd's algorithm with one initial center per seed vertex.

    Repeated seed indices merge.  Clusters that lose all members keep their
    previous center.  Ties go to the lowest cluster id.
    """
    X = emb.rows if isinstance(emb, SpectralEmbedding) else np.asarray(emb, dtype=np.float64)
    seeds = np.asarray(list(dict.fromkeys(int(s) for s in np.atleast_1d(seeds))), dtype=np.int64)
    if len(seeds) == 0:
        raise ValueError("need at least one seed")
    if seeds.min() < 0 or seeds.max() >= len(X):
        raise IndexError("seed index out of range")
    centers = X[seeds].copy()
    if len(np.unique(centers, axis=0)) < len(centers):
        log.info("duplicate seed embeddings collapse onto shared centers")
    assignment = None
    trace = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(X, centers)
        new = np.argmin(d, axis=1)
        trace.append(float(d[np.arange(len(X)), new].sum()))
        if assignment is not None and np.array_equal(new, assignment):
            break
        assignment = new
        for c in range(len(centers)):
            members = assignment == c
            if members.any():
                centers[c] = X[members].mean(axis=0)
    dist = np.linalg.norm(X - centers[assignment], axis=1)
    return ClusterResult(assignment, dist, seeds, centers, it, trace)


def map_distances(result: ClusterResult, dec: DecimatedMesh) -> np.ndarray:
    return result.center_distance[dec.origin_map]


@dataclass(frozen=True)
class SpectralConfig:
    decimation_target: int = DEFAULT_DECIMATION_TARGET
    delta: float = DEFAULT_DELTA
    embedding_length: int = DEFAULT_EMBEDDING_LENGTH
    auto_sigma: bool = True
    sigma: float = 1.0
    heat_time_scale: float = 1.0


def spectrum_distances(mesh: SceneMesh, seed_vertices, cfg: SpectralConfig | None = None) -> tuple[np.ndarray, dict]:
    """Per-original-vertex spectrum distance; seeds are original vertex indices."""
    cfg = cfg or SpectralConfig()
    dec = decimate_qem(mesh, max(cfg.decimation_target, 4))
    D = combined_distance_for_mesh(dec.mesh, cfg.delta, HeatGeodesicConfig(cfg.heat_time_scale))
    A = build_normalized_affinity(D, AffinityConfig(cfg.sigma, cfg.auto_sigma, cfg.embedding_length))
    emb = spectral_embed(A, AffinityConfig(cfg.sigma, cfg.auto_sigma, cfg.embedding_length))
    seeds = dec.origin_map[np.asarray(seed_vertices, dtype=np.int64)]
    result = seeded_kmeans(emb, seeds)
    info = {"decimated_vertices": dec.mesh.num_vertices, "exhausted": dec.exhausted,
            "kmeans_iterations": result.iterations, "heat_time": D.time}
    return map_distances(result, dec), info
