"""Oriented point clouds: container type, normal estimation, geometric edge
extraction, and diameter computation.

A cloud is a flat numpy container. Normals are unit length and oriented
(sensor-facing for scenes, outward for object models); edge flags mark points
on occlusion/boundary contours.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .geometry import RigidTransform

EXACT_DIAMETER_LIMIT = 2000


class CloudError(ValueError):
    pass


def _normalize_rows(v: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return v / norms


@dataclass(frozen=True)
class PointCloud:
    """Positions with optional unit normals and edge flags.

    Immutable by convention: operations return new clouds, the arrays are
    marked read-only. Point order is stable across operations that do not
    resample.
    """

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    edges: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise CloudError("point coordinates must be finite")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=float).reshape(-1, 3)
            if nrm.shape[0] != pts.shape[0]:
                raise CloudError("normals length mismatch")
            lens = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lens - 1.0) > 1e-6):
                nrm = _normalize_rows(nrm)
            nrm.flags.writeable = False
            object.__setattr__(self, "normals", nrm)
        if self.edges is not None:
            e = np.array(self.edges, dtype=bool).reshape(-1)
            if e.shape[0] != pts.shape[0]:
                raise CloudError("edge flags length mismatch")
            e.flags.writeable = False
            object.__setattr__(self, "edges", e)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    @property
    def has_edges(self) -> bool:
        return self.edges is not None

    @property
    def edge_points(self) -> np.ndarray:
        if self.edges is None:
            return np.empty((0, 3))
        return self.points[self.edges]

    def transformed(self, t: RigidTransform) -> "PointCloud":
        return PointCloud(
            t.apply(self.points),
            t.rotate(self.normals) if self.normals is not None else None,
            self.edges,
        )

    def subset(self, index) -> "PointCloud":
        return PointCloud(
            self.points[index],
            self.normals[index] if self.normals is not None else None,
            self.edges[index] if self.edges is not None else None,
        )


def merge_clouds(a: PointCloud, b: PointCloud) -> PointCloud:
    """Concatenate two clouds; normals/edges kept only if both sides have them."""
    normals = None
    if a.has_normals and b.has_normals:
        normals = np.vstack([a.normals, b.normals])
    edges = None
    if a.has_edges and b.has_edges:
        edges = np.concatenate([a.edges, b.edges])
    return PointCloud(np.vstack([a.points, b.points]), normals, edges)


def estimate_spacing(cloud: PointCloud) -> float:
    """Median nearest-neighbor distance; a robust sampling-step estimate."""
    if len(cloud) < 2:
        return 0.0
    tree = cKDTree(cloud.points)
    d, _ = tree.query(cloud.points, k=2, workers=-1)
    return float(np.median(d[:, 1]))


def estimate_normals(
    cloud: PointCloud,
    k: int = 10,
    viewpoint=(0.0, 0.0, 0.0),
    orient: str = "viewpoint",
) -> tuple[PointCloud, int]:
    """PCA normals from the k-neighborhood covariance, consistently oriented.

    orient="viewpoint" flips normals toward `viewpoint` (sensor convention);
    orient="outward" flips them away from the cloud centroid (object models).
    Returns the new cloud and a count of degenerate neighborhoods (those get
    a +z normal).
    """
    n = len(cloud)
    if n < k or k < 3:
        raise CloudError(f"need at least k={k} points with k >= 3, got {n}")
    if orient not in ("viewpoint", "outward"):
        raise CloudError(f"unknown orientation mode {orient!r}")
    tree = cKDTree(cloud.points)
    _, idx = tree.query(cloud.points, k=k, workers=-1)
    nbr = cloud.points[idx]  # (n, k, 3)
    centered = nbr - nbr.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending
    normals = eigvecs[:, :, 0].copy()
    degenerate = eigvals[:, 2] < 1e-18
    warnings = int(degenerate.sum())
    if warnings:
        normals[degenerate] = (0.0, 0.0, 1.0)
    normals = _normalize_rows(normals)
    if orient == "viewpoint":
        toward = np.asarray(viewpoint, dtype=float) - cloud.points
    else:
        toward = cloud.points - cloud.points.mean(axis=0)
    flip = np.einsum("ij,ij->i", normals, toward) < 0
    normals[flip] *= -1.0
    return PointCloud(cloud.points, normals, cloud.edges), warnings


def extract_edges(
    cloud: PointCloud, radius: float, gap_threshold: float = np.pi / 2
) -> tuple[PointCloud, int]:
    """Mark boundary points via the tangent-plane angular-gap criterion.

    A point is an edge when, after projecting its radius-neighbors onto its
    tangent plane, the largest polar-angle gap between consecutive neighbors
    exceeds `gap_threshold`. Points with < 3 neighbors are conservatively
    marked as edges and counted as warnings.
    """
    if not cloud.has_normals:
        raise CloudError("edge extraction requires normals")
    if radius <= 0:
        raise CloudError("radius must be positive")
    pts = cloud.points
    normals = cloud.normals
    tree = cKDTree(pts)
    neighbor_lists = tree.query_ball_point(pts, radius, workers=-1)
    edges = np.zeros(len(cloud), dtype=bool)
    warnings = 0
    # deterministic tangent basis: axis least aligned with the normal
    axes = np.eye(3)
    for i, nbrs in enumerate(neighbor_lists):
        nb = [j for j in nbrs if j != i]
        if len(nb) < 3:
            edges[i] = True
            warnings += 1
            continue
        n = normals[i]
        a = axes[int(np.argmin(np.abs(n)))]
        u = a - np.dot(a, n) * n
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        q = pts[nb] - pts[i]
        ang = np.arctan2(q @ v, q @ u)
        ang.sort()
        gaps = np.diff(ang)
        wrap_gap = 2.0 * np.pi - (ang[-1] - ang[0])
        if max(gaps.max(initial=0.0), wrap_gap) > gap_threshold:
            edges[i] = True
    return PointCloud(pts, normals, edges), warnings


def diameter(cloud: PointCloud) -> float:
    """Max pairwise distance; exact up to EXACT_DIAMETER_LIMIT points, the
    bounding-box diagonal (an upper bound within sqrt(3)) beyond that."""
    n = len(cloud)
    if n == 0:
        raise CloudError("diameter of empty cloud")
    if n == 1:
        return 0.0
    if n <= EXACT_DIAMETER_LIMIT:
        return float(pdist(cloud.points).max())
    extent = cloud.points.max(axis=0) - cloud.points.min(axis=0)
    return float(np.linalg.norm(extent))
