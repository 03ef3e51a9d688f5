"""Online matching: reference sampling, accumulator voting over
(model reference, alpha), peak extraction, and hierarchical pose clustering.

Every step-th scene point acts as a reference; it is paired with all scene
points within the model diameter, matched against the model hash table, and
each matched entry votes for (model reference index, alpha_m - alpha_s). A
winning cell reconstructs the pose as

    T = F_s^-1 * R_x(-alpha) * F_m

where F_s / F_m are the scene/model canonical frames and alpha is the voted
angle (sign折 by the convention that alpha is measured from +y toward +z).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud
from .geometry import (
    RigidTransform,
    average_quaternions,
    matrix_from_quat,
    quat_angle,
    rot_x,
    rotations_to_x_axis,
    wrap_angle,
)
from .model import ModelDescription, _quantize_batch, ppf_batch


@dataclass(frozen=True)
class MatchParams:
    """Voting and clustering knobs.

    cluster_trans_thresh is an absolute length; pipelines typically resolve
    it as 0.05 * model diameter. alpha_bins defaults to 360/5 so the angular
    resolution matches the default feature quantization.
    """

    ref_fraction: float = 0.2
    alpha_bins: int = 72
    peak_mode: str = "relative"  # "relative" (>= rho * max) or "best"
    peak_rho: float = 0.9
    cluster_rot_thresh: float = np.deg2rad(12.0)
    cluster_trans_thresh: Optional[float] = None

    def __post_init__(self):
        if not (0 < self.ref_fraction <= 1):
            raise ValueError("ref_fraction must be in (0, 1]")
        if self.alpha_bins < 4:
            raise ValueError("alpha_bins must be >= 4")
        if self.peak_mode not in ("relative", "best"):
            raise ValueError(f"unknown peak_mode {self.peak_mode!r}")
        if not (0 < self.peak_rho <= 1):
            raise ValueError("peak_rho must be in (0, 1]")
        if self.cluster_rot_thresh <= 0:
            raise ValueError("cluster_rot_thresh must be positive")

    def resolved(self, diameter: float) -> "MatchParams":
        """Fill the translation threshold from the model diameter if unset."""
        if self.cluster_trans_thresh is not None:
            return self
        return MatchParams(
            self.ref_fraction,
            self.alpha_bins,
            self.peak_mode,
            self.peak_rho,
            self.cluster_rot_thresh,
            0.05 * diameter,
        )


@dataclass
class PoseHypothesis:
    pose: RigidTransform
    votes: int
    scene_ref_index: int


@dataclass
class PoseCluster:
    pose: RigidTransform
    total_votes: int
    members: int
    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))


def reconstruct_pose(
    scene_rot: np.ndarray,
    scene_pos: np.ndarray,
    model_rot: np.ndarray,
    model_pos: np.ndarray,
    alpha: float,
) -> RigidTransform:
    """Pose aligning a matched model/scene reference pair at in-plane angle
    alpha = alpha_m - alpha_s."""
    r = scene_rot.T @ rot_x(-alpha) @ model_rot
    t = scene_pos - r @ model_pos
    return RigidTransform(r, t)


def vote(
    scene: PointCloud, model: ModelDescription, params: MatchParams
) -> List[PoseHypothesis]:
    """Accumulator voting over all sampled reference points.

    Returns one hypothesis per extracted peak, ordered by reference index.
    An empty list means no feature of any reference matched the table.
    """
    if not scene.has_normals:
        raise ValueError("scene must have normals")
    n_scene = len(scene)
    if n_scene == 0:
        return []
    step = max(1, round(1.0 / params.ref_fraction))
    refs = np.arange(0, n_scene, step)
    pts, nrm = scene.points, scene.normals
    tree = cKDTree(pts)
    ref_frames = rotations_to_x_axis(nrm[refs])
    model_frames = model.reference_frames()
    model_pts = model.model_cloud.points
    nb = params.alpha_bins
    bin_width = 2.0 * np.pi / nb
    n_model = len(model.model_cloud)
    hypotheses: List[PoseHypothesis] = []
    neighbor_lists = tree.query_ball_point(pts[refs], model.diameter, workers=-1)
    for ri, (r, nbrs) in enumerate(zip(refs, neighbor_lists)):
        others = np.asarray([j for j in nbrs if j != r], dtype=np.int64)
        if others.size == 0:
            continue
        dist, a1, a2, a3 = ppf_batch(pts[r], nrm[r], pts[others], nrm[others])
        ok = np.isfinite(dist)
        if not np.any(ok):
            continue
        others = others[ok]
        keys = _quantize_batch(
            dist[ok], a1[ok], a2[ok], a3[ok], model.diameter, model.quant
        )
        v = (pts[others] - pts[r]) @ ref_frames[ri].T
        alpha_s = np.arctan2(v[:, 2], v[:, 1])
        qi, starts, counts = model.lookup(keys)
        if qi.size == 0:
            continue
        total = int(counts.sum())
        if total == 0:
            continue
        # expand (start, count) runs into flat entry indices
        ends = np.cumsum(counts)
        entry_idx = np.arange(total) - np.repeat(ends - counts, counts) + np.repeat(
            starts, counts
        )
        pair_idx = np.repeat(qi, counts)
        alpha = model.entry_alphas[entry_idx] - alpha_s[pair_idx]
        alpha = np.where(alpha > np.pi, alpha - 2 * np.pi, alpha)
        alpha = np.where(alpha <= -np.pi, alpha + 2 * np.pi, alpha)
        abin = np.minimum(((alpha + np.pi) / bin_width).astype(np.int64), nb - 1)
        flat = model.entry_refs[entry_idx].astype(np.int64) * nb + abin
        acc = np.bincount(flat, minlength=n_model * nb)
        vmax = int(acc.max())
        if vmax == 0:
            continue
        if params.peak_mode == "best":
            peak_cells = np.array([int(acc.argmax())])
        else:
            peak_cells = np.nonzero(acc >= params.peak_rho * vmax)[0]
        for cell in peak_cells:
            mi, ab = divmod(int(cell), nb)
            alpha_c = -np.pi + (ab + 0.5) * bin_width
            pose = reconstruct_pose(
                ref_frames[ri], pts[r], model_frames[mi], model_pts[mi], alpha_c
            )
            hypotheses.append(PoseHypothesis(pose, int(acc[cell]), int(r)))
    return hypotheses


def cluster_poses(
    hyps: List[PoseHypothesis], params: MatchParams
) -> List[PoseCluster]:
    """Greedy agglomeration in descending-vote order.

    A hypothesis joins the first cluster whose running averaged pose is within
    both the rotation and translation thresholds; cluster poses are the
    sign-aligned normalized quaternion mean and arithmetic mean translation,
    scores are summed.
    """
    if not hyps:
        raise ValueError("no hypotheses to cluster")
    if params.cluster_trans_thresh is None:
        raise ValueError("cluster_trans_thresh unresolved; call params.resolved(d)")
    order = sorted(range(len(hyps)), key=lambda i: -hyps[i].votes)
    quats = [h.pose.quat() for h in hyps]
    clusters: list[dict] = []
    for i in order:
        h = hyps[i]
        q, t = quats[i], h.pose.translation
        placed = False
        for c in clusters:
            if (
                quat_angle(c["quat"], q) <= params.cluster_rot_thresh
                and np.linalg.norm(c["t_mean"] - t) <= params.cluster_trans_thresh
            ):
                c["members"].append(i)
                c["votes"] += h.votes
                member_quats = np.asarray([quats[j] for j in c["members"]])
                c["quat"] = average_quaternions(member_quats)
                c["t_mean"] = np.mean(
                    [hyps[j].pose.translation for j in c["members"]], axis=0
                )
                placed = True
                break
        if not placed:
            clusters.append(
                {"quat": q, "t_mean": t.copy(), "votes": h.votes, "members": [i]}
            )
    out = [
        PoseCluster(
            pose=RigidTransform(matrix_from_quat(c["quat"]), c["t_mean"]),
            total_votes=int(c["votes"]),
            members=len(c["members"]),
            quat=c["quat"],
        )
        for c in clusters
    ]
    out.sort(key=lambda c: -c.total_votes)
    return out


__all__ = [
    "MatchParams",
    "PoseHypothesis",
    "PoseCluster",
    "vote",
    "cluster_poses",
    "reconstruct_pose",
    "wrap_angle",
]
