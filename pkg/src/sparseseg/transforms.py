"""Random viewpoint transformations and farthest point sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import SceneMesh

DEFAULT_JITTER_SIGMA = 255 * 0.05
DEFAULT_FPS_TARGET = 1024


@dataclass(frozen=True)
class TransformSpec:
    rotation_angle_z: float = 0.0
    mirror_mask: tuple[bool, bool, bool] = (False, False, False)
    jitter_sigma: float = DEFAULT_JITTER_SIGMA
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 <= self.rotation_angle_z < 2 * np.pi:
            raise ValueError(f"rotation angle {self.rotation_angle_z} outside [0, 2pi)")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be non-negative")
        if len(self.mirror_mask) != 3:
            raise ValueError("mirror_mask needs one flag per axis")

    def matrix(self) -> np.ndarray:
        """Rotation about z followed by per-axis mirroring, as a 3x3 matrix."""
        c, s = np.cos(self.rotation_angle_z), np.sin(self.rotation_angle_z)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        mirror = np.diag([-1.0 if m else 1.0 for m in self.mirror_mask])
        return mirror @ rot


@dataclass(frozen=True, eq=False)
class SampleIndexSet:
    indices: np.ndarray
    target_size: int

    def __len__(self) -> int:
        return len(self.indices)


def apply_transform(spec: TransformSpec, cloud: SceneMesh) -> SceneMesh:
    positions = cloud.vertices @ spec.matrix().T
    colors = cloud.colors
    if colors is not None and spec.jitter_sigma > 0:
        rng = np.random.default_rng(spec.rng_seed)
        noise = rng.normal(0.0, spec.jitter_sigma, size=colors.shape)
        colors = np.clip(colors + noise, 0.0, 255.0)
    return cloud.replace(vertices=positions, colors=colors)


def _draw_spec(rng: np.random.Generator, jitter_sigma: float) -> TransformSpec:
    angle = float(rng.uniform(0.0, 2 * np.pi))
    if angle >= 2 * np.pi:  # guard against rounding up to the open end
        angle = 0.0
    mirror = tuple(bool(m) for m in rng.random(3) < 0.5)
    return TransformSpec(angle, mirror, jitter_sigma, int(rng.integers(0, 2**63 - 1)))


def sample_transform_pair(seed: int, jitter_sigma: float = DEFAULT_JITTER_SIGMA) -> tuple[TransformSpec, TransformSpec]:
    rng = np.random.default_rng(seed)
    return _draw_spec(rng, jitter_sigma), _draw_spec(rng, jitter_sigma)


def fps(cloud: SceneMesh | np.ndarray, target: int = DEFAULT_FPS_TARGET,
        start_index: int | None = None, seed: int | None = None) -> SampleIndexSet:
    """Greedy farthest point sampling.

    Starts from ``start_index`` (or a seeded random vertex) and repeatedly
    adds the point whose distance to the selected set is largest. Ties go to
    the lowest index.
    """
    points = cloud.vertices if isinstance(cloud, SceneMesh) else np.asarray(cloud, dtype=np.float64)
    n = len(points)
    if n == 0:
        raise ValueError("cannot sample from an empty cloud")
    if target < 1:
        raise ValueError("target must be >= 1")
    if start_index is None:
        start_index = int(np.random.default_rng(seed).integers(n))
    if not 0 <= start_index < n:
        raise IndexError(f"start index {start_index} out of range for {n} points")
    m = min(target, n)
    selected = np.empty(m, dtype=np.int64)
    selected[0] = start_index
    dist = np.sum((points - points[start_index]) ** 2, axis=1)
    dist[start_index] = -1.0
    for k in range(1, m):
        nxt = int(np.argmax(dist))
        selected[k] = nxt
        np.minimum(dist, np.sum((points - points[nxt]) ** 2, axis=1), out=dist)
        dist[nxt] = -1.0
    return SampleIndexSet(selected, target)
