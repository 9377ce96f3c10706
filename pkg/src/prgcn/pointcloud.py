"""Point-cloud geometry: back-projection, sampling, neighbors, Chamfer distance,
normalization, synthetic scenes and ASCII PLY files."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .pose import Pose


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be N x 3, got shape {pts.shape}")
        if len(pts) < 1:
            raise ValueError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud has non-finite coordinates")
        self.points = pts
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=np.float64)
            if c.shape != pts.shape:
                raise ValueError(f"colors must be {pts.shape}, got {c.shape}")
            if np.any(c < 0) or np.any(c > 1):
                raise ValueError("colors must lie in [0, 1]")
            self.colors = c

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.intp)
        return PointCloud(self.points[idx], None if self.colors is None else self.colors[idx])


def _points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError(f"expected a non-empty N x 3 array, got shape {pts.shape}")
    return pts


# ---------------------------------------------------------------------------
# Depth back-projection


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")


@dataclass
class DepthImage:
    depth: np.ndarray  # H x W, meters, 0 = invalid
    mask: np.ndarray  # H x W foreground
    colors: np.ndarray | None = None  # H x W x 3 in [0, 1]

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.depth.ndim != 2 or self.mask.shape != self.depth.shape:
            raise ValueError("depth and mask must be matching H x W arrays")
        if np.any(self.depth < 0):
            raise ValueError("depth must be non-negative")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


def pct(depth: DepthImage, intrinsics: CameraIntrinsics) -> PointCloud:
    """Back-project every masked pixel with valid depth, in raster order."""
    valid = depth.mask & (depth.depth > 0)
    v, u = np.nonzero(valid)
    if len(u) == 0:
        raise ValueError("no foreground points")
    d = depth.depth[v, u]
    pts = np.stack([(u - intrinsics.cx) * d / intrinsics.fx,
                    (v - intrinsics.cy) * d / intrinsics.fy, d], axis=1)
    colors = None if depth.colors is None else np.asarray(depth.colors)[v, u]
    return PointCloud(pts, colors)


def project(points: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection to (u, v, d) rows."""
    p = _points(points)
    z = p[:, 2]
    return np.stack([p[:, 0] * intrinsics.fx / z + intrinsics.cx,
                     p[:, 1] * intrinsics.fy / z + intrinsics.cy, z], axis=1)


# ---------------------------------------------------------------------------
# Distances, neighbors, sampling


def pairwise_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def chamfer(P, Q) -> float:
    """Bidirectional mean squared nearest-neighbor distance."""
    p, q = _points(P), _points(Q)
    d = pairwise_sqdist(p, q)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def knn(cloud, k: int) -> np.ndarray:
    """(N, k) indices of each point's k nearest *other* points, ties to lower index."""
    p = _points(cloud)
    n = len(p)
    if k < 1 or k >= n:
        raise ValueError(f"knn needs 1 <= k < N (k={k}, N={n})")
    d = pairwise_sqdist(p, p)
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def fps(cloud, m: int, start_index: int = 0) -> np.ndarray:
    """Farthest-point sampling; returns ``m`` indices in selection order."""
    p = _points(cloud)
    n = len(p)
    if not 1 <= m <= n:
        raise ValueError(f"fps needs 1 <= m <= N (m={m}, N={n})")
    if not 0 <= start_index < n:
        raise ValueError(f"start_index {start_index} out of range for N={n}")
    chosen = np.empty(m, dtype=np.intp)
    chosen[0] = start_index
    dist = ((p - p[start_index]) ** 2).sum(axis=1)
    dist[start_index] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, ((p - p[nxt]) ** 2).sum(axis=1))
        dist[chosen[: i + 1]] = -1.0
    return chosen


def downsample_scales(cloud: PointCloud) -> tuple[PointCloud, PointCloud]:
    p = cloud if isinstance(cloud, PointCloud) else PointCloud(cloud)
    n = len(p)
    if n < 4:
        raise ValueError(f"need at least 4 points to downsample, got {n}")
    return p.subset(fps(p, n // 2)), p.subset(fps(p, n // 4))


def normalize(cloud: PointCloud) -> tuple[PointCloud, np.ndarray, float]:
    """Center on the mean and scale so the farthest point sits at radius 1."""
    p = cloud if isinstance(cloud, PointCloud) else PointCloud(cloud)
    centroid = p.points.mean(axis=0)
    centered = p.points - centroid
    scale = float(np.sqrt((centered ** 2).sum(axis=1).max()))
    if scale == 0.0:
        scale = 1.0
    return PointCloud(centered / scale, p.colors), centroid, scale


def principal_axes(points: np.ndarray) -> np.ndarray:
    """Proper rotation whose rows are the principal axes of the centered cloud,
    widest spread first.

    Each axis points toward the side with positive third moment, and the last axis
    is flipped when needed to keep det = +1. Rotating the input rotates the axes
    along with it, except on exact sign ties.
    """
    X = np.asarray(points, dtype=np.float64)
    X = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(X, full_matrices=True)
    skew = ((X @ vt.T) ** 3).sum(axis=0)
    R = vt * np.where(skew < 0, -1.0, 1.0)[:, None]
    if np.linalg.det(R) < 0:
        R[2] *= -1
    return R


@dataclass(frozen=True)
class Frame:
    """Similarity transform into a network's working frame: x -> R (x - c) / s."""

    centroid: np.ndarray
    scale: float
    rotation: np.ndarray

    @classmethod
    def of(cls, cloud, canonical: bool = False) -> "Frame":
        """Centered, unit-radius frame; with ``canonical`` also aligned to the principal axes."""
        normed, centroid, scale = normalize(cloud)
        R = principal_axes(normed.points) if canonical else np.eye(3)
        return cls(centroid, scale, R)

    def forward(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.centroid) / self.scale @ self.rotation.T

    def inverse(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation * self.scale + self.centroid


def resample(cloud: PointCloud, n: int, rng: np.random.Generator) -> PointCloud:
    """Bring a cloud to exactly ``n`` points: FPS down, or draw with replacement up."""
    if len(cloud) >= n:
        return cloud.subset(fps(cloud, n))
    extra = rng.integers(0, len(cloud), size=n - len(cloud))
    return cloud.subset(np.concatenate([np.arange(len(cloud)), extra]))


# ---------------------------------------------------------------------------
# Synthetic scenes

Shape = Literal["sphere", "cube", "torus"]
SHAPES: tuple[str, ...] = ("sphere", "cube", "torus")

SPHERE_RADIUS = 0.05
CUBE_HALF = 0.05
TORUS_R, TORUS_r = 0.04, 0.015


@dataclass(frozen=True)
class SyntheticSpec:
    shape: str = "sphere"
    n_points: int = 512
    occlusion_fraction: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; choose from {SHAPES}")
        if self.n_points < 1:
            raise ValueError("n_points must be positive")
        if not 0.0 <= self.occlusion_fraction < 1.0:
            raise ValueError("occlusion_fraction must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


def sample_surface(shape: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniform by area on the canonical surface, centered at the origin."""
    if shape == "sphere":
        v = rng.normal(size=(n, 3))
        return SPHERE_RADIUS * v / np.linalg.norm(v, axis=1, keepdims=True)
    if shape == "cube":
        face = rng.integers(0, 6, size=n)
        uv = rng.uniform(-CUBE_HALF, CUBE_HALF, size=(n, 2))
        axis = face % 3
        sign = np.where(face < 3, 1.0, -1.0)
        pts = np.empty((n, 3))
        for a in range(3):
            rows = axis == a
            others = [b for b in range(3) if b != a]
            pts[rows, a] = sign[rows] * CUBE_HALF
            pts[rows, others[0]] = uv[rows, 0]
            pts[rows, others[1]] = uv[rows, 1]
        return pts
    if shape == "torus":
        out = np.empty((0, 3))
        while len(out) < n:
            theta = rng.uniform(0, 2 * np.pi, size=2 * n)
            phi = rng.uniform(0, 2 * np.pi, size=2 * n)
            keep = rng.uniform(0, 1, size=2 * n) < (TORUS_R + TORUS_r * np.cos(phi)) / (TORUS_R + TORUS_r)
            theta, phi = theta[keep], phi[keep]
            ring = TORUS_R + TORUS_r * np.cos(phi)
            pts = np.stack([ring * np.cos(theta), ring * np.sin(theta), TORUS_r * np.sin(phi)], axis=1)
            out = np.concatenate([out, pts])
        return out[:n]
    raise ValueError(f"unknown shape {shape!r}")


def canonical_colors(shape: str, canonical: np.ndarray) -> np.ndarray:
    """Color each point by its canonical position so texture carries orientation."""
    extent = {"sphere": SPHERE_RADIUS, "cube": CUBE_HALF, "torus": TORUS_R + TORUS_r}[shape]
    return np.clip(0.5 + canonical / (2 * extent), 0.0, 1.0)


def synth_scene(spec: SyntheticSpec) -> tuple[PointCloud, PointCloud, Pose]:
    """Ground-truth cloud, its occluded + noisy copy, and the object pose."""
    rng = np.random.default_rng(spec.seed)
    canonical = sample_surface(spec.shape, spec.n_points, rng)
    colors = canonical_colors(spec.shape, canonical)
    pose = Pose.random(rng)
    gt = PointCloud(pose.apply(canonical), colors)

    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    n = spec.n_points
    # kept count rounds half up, so a 0.5 cut keeps ceil(n/2)
    kept = int(math.floor((1.0 - spec.occlusion_fraction) * n + 0.5 + 1e-9))
    if kept < 1:
        raise ValueError("all points occluded")
    proj = (gt.points - gt.points.mean(axis=0)) @ direction
    order = np.argsort(-proj, kind="stable")
    keep = np.zeros(n, dtype=bool)
    keep[order[n - kept:]] = True
    noise = rng.normal(0.0, 1.0, size=(kept, 3)) * spec.noise_sigma
    corrupt = PointCloud(gt.points[keep] + noise, colors[keep])
    return gt, corrupt, pose


def synth_cloud_for_checks(rng: np.random.Generator, n: int) -> np.ndarray:
    """Generic random cloud with well-separated points, for gradient checks."""
    return rng.normal(size=(n, 3)) * 0.5


# ---------------------------------------------------------------------------
# PLY


def write_ply(path, cloud: PointCloud) -> None:
    pts = np.asarray(cloud.points, dtype=np.float32)
    header = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
              "property float x", "property float y", "property float z"]
    cols = None
    if cloud.colors is not None:
        cols = np.asarray(cloud.colors, dtype=np.float32)
        header += ["property float red", "property float green", "property float blue"]
    header.append("end_header")
    rows = pts if cols is None else np.concatenate([pts, cols], axis=1)
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        for row in rows:
            fh.write(" ".join(f"{float(v):.9g}" for v in row) + "\n")


def read_ply(path) -> PointCloud:
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n = None
        props: list[str] = []
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "format" and parts[1] != "ascii":
                raise ValueError(f"{path}: only ASCII PLY is supported")
            elif parts[0] == "element":
                if parts[1] != "vertex":
                    raise ValueError(f"{path}: unsupported element {parts[1]!r}")
                n = int(parts[2])
            elif parts[0] == "property":
                props.append(parts[-1])
            elif parts[0] == "end_header":
                break
        if n is None:
            raise ValueError(f"{path}: missing vertex count")
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2, max_rows=n)
    if data.shape != (n, len(props)):
        raise ValueError(f"{path}: expected {n} rows of {len(props)} values, got {data.shape}")
    col = {name: i for i, name in enumerate(props)}
    try:
        pts = data[:, [col["x"], col["y"], col["z"]]]
    except KeyError:
        raise ValueError(f"{path}: missing x/y/z properties") from None
    colors = None
    if all(c in col for c in ("red", "green", "blue")):
        colors = data[:, [col["red"], col["green"], col["blue"]]]
    return PointCloud(pts, colors)


def ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)
