"""Scene/model downsampling.

`cluster_downsample` is the edge-preserving variant: a fine voxel grid merges
points with similar normals, edge points are then frozen, and the surviving
non-edge representatives are re-merged on progressively coarser grids with a
tightening normal threshold. `uniform_downsample` is the plain one-pass voxel
centroid baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import CloudError, PointCloud


@dataclass(frozen=True)
class SamplingParams:
    """Knobs for cluster_downsample.

    base_cell is an absolute length (callers usually derive it from the model
    diameter); theta0 is the level-1 normal-merge threshold in radians, scaled
    by theta_decay at each coarser level. Cell size doubles per level.
    """

    base_cell: float
    theta0: float = np.deg2rad(30.0)
    levels: int = 3
    theta_decay: float = 0.5
    preserve_edges: bool = True

    def __post_init__(self):
        if self.base_cell <= 0:
            raise ValueError("base_cell must be positive")
        if not (0 < self.theta0 <= np.pi):
            raise ValueError("theta0 must be in (0, 180] degrees")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if not (0 < self.theta_decay <= 1):
            raise ValueError("theta_decay must be in (0, 1]")


def _voxel_keys(points: np.ndarray, origin: np.ndarray, cell: float) -> np.ndarray:
    ijk = np.floor((points - origin) / cell).astype(np.int64)
    ijk = np.maximum(ijk, 0)  # guard against -0.0/rounding at the min corner
    # pack into one int64; 2^21 cells per axis is ample for any real cloud
    return (ijk[:, 0] << 42) | (ijk[:, 1] << 21) | ijk[:, 2]


def _merge_cell(points, normals, order, theta):
    """Greedy seed clustering inside one voxel; deterministic in input order.

    Returns lists of (centroid, mean_normal) per cluster.
    """
    reps = []
    seeds = []
    members = []
    cos_theta = np.cos(theta)
    for i in order:
        n = normals[i]
        placed = False
        for ci, seed in enumerate(seeds):
            if np.dot(n, seed) >= cos_theta:
                members[ci].append(i)
                placed = True
                break
        if not placed:
            seeds.append(n)
            members.append([i])
    for ci in range(len(seeds)):
        idx = members[ci]
        centroid = points[idx].mean(axis=0)
        mean_n = normals[idx].sum(axis=0)
        norm = np.linalg.norm(mean_n)
        mean_n = seeds[ci] if norm < 1e-12 else mean_n / norm
        reps.append((centroid, mean_n))
    return reps


def _merge_level(points, normals, edge_flags, origin, cell, theta):
    """One grid pass; returns representative points/normals/edge flags."""
    keys = _voxel_keys(points, origin, cell)
    order = np.argsort(keys, kind="stable")
    out_p, out_n, out_e = [], [], []
    i = 0
    n = len(keys)
    while i < n:
        j = i
        while j < n and keys[order[j]] == keys[order[i]]:
            j += 1
        cell_idx = order[i:j]
        if edge_flags is None:
            groups = [(cell_idx, False)]
        else:
            flags = edge_flags[cell_idx]
            groups = []
            if np.any(~flags):
                groups.append((cell_idx[~flags], False))
            if np.any(flags):
                groups.append((cell_idx[flags], True))
        for idx, is_edge in groups:
            for centroid, mean_n in _merge_cell(points, normals, idx, theta):
                out_p.append(centroid)
                out_n.append(mean_n)
                out_e.append(is_edge)
        i = j
    return (
        np.asarray(out_p).reshape(-1, 3),
        np.asarray(out_n).reshape(-1, 3),
        np.asarray(out_e, dtype=bool),
    )


def cluster_downsample(cloud: PointCloud, params: SamplingParams) -> PointCloud:
    """Edge-preserving fine-to-coarse downsampling.

    Level 1 merges on the finest grid (edge and non-edge points clustered
    separately so duplicate edge samples still collapse); edge representatives
    are kept untouched from then on, non-edge representatives are re-merged at
    doubled cell size and decayed theta per level.
    """
    if len(cloud) == 0:
        return cloud
    if not cloud.has_normals:
        raise CloudError("cluster_downsample requires normals")
    if params.preserve_edges and not cloud.has_edges:
        raise CloudError("preserve_edges requires edge flags")
    edge_flags = cloud.edges if params.preserve_edges else None
    origin = cloud.points.min(axis=0)
    pts, nrm, edq = _merge_level(
        cloud.points, cloud.normals, edge_flags, origin, params.base_cell, params.theta0
    )
    edge_p, edge_n = pts[edq], nrm[edq]
    pts, nrm = pts[~edq], nrm[~edq]
    cell, theta = params.base_cell, params.theta0
    for _ in range(1, params.levels):
        if len(pts) == 0:
            break
        cell *= 2.0
        theta *= params.theta_decay
        pts, nrm, _ = _merge_level(pts, nrm, None, origin, cell, theta)
    out_pts = np.vstack([edge_p, pts])
    out_nrm = np.vstack([edge_n, nrm])
    out_edges = np.concatenate(
        [np.ones(len(edge_p), dtype=bool), np.zeros(len(pts), dtype=bool)]
    )
    return PointCloud(out_pts, out_nrm, out_edges if cloud.has_edges else None)


def uniform_downsample(cloud: PointCloud, cell: float) -> PointCloud:
    """One centroid per occupied voxel; mean normal renormalized."""
    if cell <= 0:
        raise ValueError("cell must be positive")
    if len(cloud) == 0:
        return cloud
    origin = cloud.points.min(axis=0)
    keys = _voxel_keys(cloud.points, origin, cell)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    boundaries = np.concatenate(
        [[0], np.nonzero(np.diff(sorted_keys))[0] + 1, [len(keys)]]
    )
    out_p, out_n, out_e = [], [], []
    for a, b in zip(boundaries[:-1], boundaries[1:]):
        idx = order[a:b]
        out_p.append(cloud.points[idx].mean(axis=0))
        if cloud.has_normals:
            mean_n = cloud.normals[idx].sum(axis=0)
            norm = np.linalg.norm(mean_n)
            out_n.append(cloud.normals[idx[0]] if norm < 1e-12 else mean_n / norm)
        if cloud.has_edges:
            out_e.append(bool(cloud.edges[idx].any()))
    return PointCloud(
        np.asarray(out_p),
        np.asarray(out_n) if cloud.has_normals else None,
        np.asarray(out_e, dtype=bool) if cloud.has_edges else None,
    )
