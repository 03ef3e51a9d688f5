"""Point pair features, quantization, and the offline global model table.

A point pair feature for oriented points (p_r, n_r), (p_s, n_s) is

    (||d||, angle(n_r, d), angle(n_s, d), angle(n_r, n_s)),   d = p_r - p_s.

Quantized features index a flat hash table mapping each key to the list of
(reference index, alpha) entries, where alpha is the in-plane angle of the
second point in the reference point's canonical frame (reference at the
origin, its normal on +x, angle measured in the y-z plane from +y).

Pairs whose normals are nearly parallel (< 5 deg, planar regions) or nearly
opposite (> 175 deg, never co-visible) are filtered out at build time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud, diameter as cloud_diameter
from .geometry import rotations_to_x_axis

MODEL_MAGIC = b"PPFM"
MODEL_VERSION = 1

# normal-angle visibility/planarity filter bounds
MIN_PAIR_NORMAL_ANGLE = np.deg2rad(5.0)
MAX_PAIR_NORMAL_ANGLE = np.deg2rad(175.0)


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class QuantParams:
    """Feature quantization steps: distance as a fraction of the model
    diameter, angle step in radians."""

    delta_dist_rel: float = 0.025
    delta_angle: float = np.deg2rad(5.0)

    def __post_init__(self):
        if self.delta_dist_rel <= 0 or self.delta_angle <= 0:
            raise ValueError("quantization steps must be positive")

    @property
    def n_angle_bins(self) -> int:
        return int(np.ceil(np.pi / self.delta_angle))


@dataclass
class PairFilterStats:
    total_pairs: int = 0
    low_angle: int = 0
    high_angle: int = 0
    stored: int = 0
    degenerate_alpha: int = 0


def compute_ppf(pr_pos, pr_normal, ps_pos, ps_normal) -> tuple[float, float, float, float]:
    """Single-pair feature; raises on coincident points."""
    d = np.asarray(pr_pos, float) - np.asarray(ps_pos, float)
    dist = float(np.linalg.norm(d))
    if dist < 1e-12:
        raise ValueError("coincident points: pair direction undefined")
    dn = d / dist
    nr = np.asarray(pr_normal, float)
    ns = np.asarray(ps_normal, float)
    a1 = float(np.arccos(np.clip(np.dot(nr, dn), -1.0, 1.0)))
    a2 = float(np.arccos(np.clip(np.dot(ns, dn), -1.0, 1.0)))
    a3 = float(np.arccos(np.clip(np.dot(nr, ns), -1.0, 1.0)))
    return dist, a1, a2, a3


def ppf_batch(pr_pos, pr_normal, ps_pos, ps_normals):
    """Features of one reference against many second points.

    Returns (dist, a1, a2, a3) arrays; entries with zero distance are NaN.
    """
    d = np.asarray(pr_pos, float)[None, :] - np.asarray(ps_pos, float)
    dist = np.linalg.norm(d, axis=1)
    ok = dist > 1e-12
    dn = np.where(ok[:, None], d / np.where(ok, dist, 1.0)[:, None], np.nan)
    nr = np.asarray(pr_normal, float)
    a1 = np.arccos(np.clip(dn @ nr, -1.0, 1.0))
    a2 = np.arccos(np.clip(np.einsum("ij,ij->i", np.asarray(ps_normals, float), dn), -1.0, 1.0))
    a3 = np.arccos(np.clip(np.asarray(ps_normals, float) @ nr, -1.0, 1.0))
    dist = np.where(ok, dist, np.nan)
    return dist, a1, a2, a3


def quantize_ppf(feature, diameter: float, q: QuantParams) -> tuple[int, int, int, int]:
    """Bin a feature: floor quantization, 180 deg clamped into the last bin."""
    dist, a1, a2, a3 = feature
    step = q.delta_dist_rel * diameter
    db = int(np.floor(dist / step))
    last = q.n_angle_bins - 1
    bins = tuple(
        min(int(np.floor(a / q.delta_angle)), last) for a in (a1, a2, a3)
    )
    return (db, *bins)


def pack_key(db: int, a1: int, a2: int, a3: int) -> int:
    """Pack four bin indices (each < 2^16) into one int64 hash key."""
    return (db << 48) | (a1 << 32) | (a2 << 16) | a3


def _pack_keys(db, a1, a2, a3):
    return (
        (db.astype(np.int64) << 48)
        | (a1.astype(np.int64) << 32)
        | (a2.astype(np.int64) << 16)
        | a3.astype(np.int64)
    )


def _quantize_batch(dist, a1, a2, a3, diam, q: QuantParams):
    step = q.delta_dist_rel * diam
    db = np.floor(dist / step).astype(np.int64)
    last = q.n_angle_bins - 1
    ab = [
        np.minimum(np.floor(a / q.delta_angle).astype(np.int64), last)
        for a in (a1, a2, a3)
    ]
    return _pack_keys(db, *ab)


def alpha_angles(ref_rot: np.ndarray, ref_pos: np.ndarray, others: np.ndarray) -> np.ndarray:
    """In-plane angles of `others` in a reference canonical frame.

    ref_rot aligns the reference normal with +x; the angle is measured in the
    y-z plane from +y, in (-pi, pi]. Points on the normal axis get 0.
    """
    v = (np.asarray(others, float) - np.asarray(ref_pos, float)) @ ref_rot.T
    return np.arctan2(v[:, 2], v[:, 1])


def compute_alpha(pr_pos, pr_normal, other_pos) -> float:
    """Scalar alpha of one point in the reference canonical frame."""
    rot = rotations_to_x_axis(np.asarray(pr_normal, float)[None, :])[0]
    return float(alpha_angles(rot, pr_pos, np.asarray(other_pos, float)[None, :])[0])


@dataclass
class ModelDescription:
    """Offline global description of one object.

    The table is stored as parallel sorted arrays for vectorized lookup:
    sorted_keys (U,), offsets (U+1,) into entry_refs/entry_alphas (T,).
    """

    model_cloud: PointCloud
    diameter: float
    quant: QuantParams
    sorted_keys: np.ndarray
    offsets: np.ndarray
    entry_refs: np.ndarray
    entry_alphas: np.ndarray
    filter_stats: PairFilterStats = field(default_factory=PairFilterStats)
    _frames: np.ndarray | None = None

    @property
    def n_keys(self) -> int:
        return len(self.sorted_keys)

    @property
    def n_entries(self) -> int:
        return len(self.entry_refs)

    def entries_for_key(self, key: int):
        """(reference indices, alphas) stored under a packed key."""
        i = np.searchsorted(self.sorted_keys, key)
        if i >= len(self.sorted_keys) or self.sorted_keys[i] != key:
            return np.empty(0, dtype=np.int32), np.empty(0)
        a, b = self.offsets[i], self.offsets[i + 1]
        return self.entry_refs[a:b], self.entry_alphas[a:b]

    def lookup(self, keys: np.ndarray):
        """Vectorized lookup; returns (query_index, entry_start, entry_count)
        arrays restricted to keys present in the table."""
        pos = np.searchsorted(self.sorted_keys, keys)
        pos_c = np.minimum(pos, len(self.sorted_keys) - 1)
        hit = (len(self.sorted_keys) > 0) & (self.sorted_keys[pos_c] == keys)
        qi = np.nonzero(hit)[0]
        starts = self.offsets[pos_c[qi]]
        counts = self.offsets[pos_c[qi] + 1] - starts
        return qi, starts, counts

    def reference_frames(self) -> np.ndarray:
        """Cached canonical-frame rotations of every model point."""
        if self._frames is None:
            self._frames = rotations_to_x_axis(self.model_cloud.normals)
        return self._frames


def build_model(model_cloud: PointCloud, quant: QuantParams | None = None) -> ModelDescription:
    """Compute, filter, quantize and index all ordered point pair features."""
    if quant is None:
        quant = QuantParams()
    n = len(model_cloud)
    if n < 2:
        raise ValueError("model cloud needs at least 2 points")
    if not model_cloud.has_normals:
        raise ValueError("model cloud needs normals")
    diam = cloud_diameter(model_cloud)
    if diam <= 0:
        raise ValueError("degenerate model: zero diameter")
    pts = model_cloud.points
    nrm = model_cloud.normals
    frames = rotations_to_x_axis(nrm)
    stats = PairFilterStats(total_pairs=n * (n - 1))
    keys_parts, refs_parts, alphas_parts = [], [], []
    cos_min = np.cos(MIN_PAIR_NORMAL_ANGLE)  # angles below MIN have cos above this
    cos_max = np.cos(MAX_PAIR_NORMAL_ANGLE)
    for i in range(n):
        dist, a1, a2, a3 = ppf_batch(pts[i], nrm[i], pts, nrm)
        cos_ns = nrm @ nrm[i]
        keep = np.ones(n, dtype=bool)
        keep[i] = False
        valid = keep & np.isfinite(dist)
        low = valid & (cos_ns > cos_min)
        high = valid & (cos_ns < cos_max)
        stats.low_angle += int(low.sum())
        stats.high_angle += int(high.sum())
        sel = valid & ~low & ~high
        if not np.any(sel):
            continue
        keys = _quantize_batch(dist[sel], a1[sel], a2[sel], a3[sel], diam, quant)
        alphas = alpha_angles(frames[i], pts[i], pts[sel])
        planar = np.linalg.norm(
            ((pts[sel] - pts[i]) @ frames[i].T)[:, 1:], axis=1
        ) < 1e-12
        stats.degenerate_alpha += int(planar.sum())
        keys_parts.append(keys)
        refs_parts.append(np.full(int(sel.sum()), i, dtype=np.int32))
        alphas_parts.append(alphas)
    if keys_parts:
        all_keys = np.concatenate(keys_parts)
        all_refs = np.concatenate(refs_parts)
        all_alphas = np.concatenate(alphas_parts)
    else:
        all_keys = np.empty(0, dtype=np.int64)
        all_refs = np.empty(0, dtype=np.int32)
        all_alphas = np.empty(0)
    stats.stored = len(all_keys)
    order = np.argsort(all_keys, kind="stable")
    sk = all_keys[order]
    uniq, first = np.unique(sk, return_index=True)
    offsets = np.concatenate([first, [len(sk)]]).astype(np.int64)
    return ModelDescription(
        model_cloud=model_cloud,
        diameter=diam,
        quant=quant,
        sorted_keys=uniq.astype(np.int64),
        offsets=offsets,
        entry_refs=all_refs[order],
        entry_alphas=all_alphas[order],
        filter_stats=stats,
    )


def save_model(desc: ModelDescription, path) -> None:
    """Serialize to the versioned PPFM binary format (little-endian)."""
    cloud = desc.model_cloud
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", MODEL_VERSION))
        f.write(struct.pack("<dd", desc.quant.delta_dist_rel, desc.quant.delta_angle))
        f.write(struct.pack("<d", desc.diameter))
        f.write(
            struct.pack(
                "<QBB", len(cloud), int(cloud.has_normals), int(cloud.has_edges)
            )
        )
        f.write(np.ascontiguousarray(cloud.points, dtype="<f8").tobytes())
        if cloud.has_normals:
            f.write(np.ascontiguousarray(cloud.normals, dtype="<f8").tobytes())
        if cloud.has_edges:
            f.write(cloud.edges.astype("u1").tobytes())
        f.write(struct.pack("<QQ", desc.n_keys, desc.n_entries))
        f.write(desc.sorted_keys.astype("<i8").tobytes())
        f.write(desc.offsets.astype("<i8").tobytes())
        f.write(desc.entry_refs.astype("<i4").tobytes())
        f.write(desc.entry_alphas.astype("<f8").tobytes())
        s = desc.filter_stats
        f.write(
            struct.pack(
                "<5Q", s.total_pairs, s.low_angle, s.high_angle, s.stored,
                s.degenerate_alpha,
            )
        )


def _read_exact(f, size, what):
    buf = f.read(size)
    if len(buf) != size:
        raise ModelFormatError(f"truncated model file while reading {what}")
    return buf


def load_model(path) -> ModelDescription:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MODEL_MAGIC:
            raise ModelFormatError("not a PPFM model file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != MODEL_VERSION:
            raise ModelFormatError(f"unsupported model version {version}")
        ddr, dang = struct.unpack("<dd", _read_exact(f, 16, "quantization"))
        (diam,) = struct.unpack("<d", _read_exact(f, 8, "diameter"))
        n, has_n, has_e = struct.unpack("<QBB", _read_exact(f, 10, "cloud header"))
        pts = np.frombuffer(_read_exact(f, n * 24, "points"), dtype="<f8").reshape(n, 3)
        normals = None
        if has_n:
            normals = np.frombuffer(
                _read_exact(f, n * 24, "normals"), dtype="<f8"
            ).reshape(n, 3)
        edges = None
        if has_e:
            edges = np.frombuffer(_read_exact(f, n, "edges"), dtype="u1").astype(bool)
        u, t = struct.unpack("<QQ", _read_exact(f, 16, "table header"))
        keys = np.frombuffer(_read_exact(f, u * 8, "keys"), dtype="<i8")
        offsets = np.frombuffer(_read_exact(f, (u + 1) * 8, "offsets"), dtype="<i8")
        refs = np.frombuffer(_read_exact(f, t * 4, "entry refs"), dtype="<i4")
        alphas = np.frombuffer(_read_exact(f, t * 8, "entry alphas"), dtype="<f8")
        stats = PairFilterStats(*struct.unpack("<5Q", _read_exact(f, 40, "stats")))
        return ModelDescription(
            model_cloud=PointCloud(pts, normals, edges),
            diameter=diam,
            quant=QuantParams(ddr, dang),
            sorted_keys=keys.copy(),
            offsets=offsets.copy(),
            entry_refs=refs.copy(),
            entry_alphas=alphas.copy(),
            filter_stats=stats,
        )
