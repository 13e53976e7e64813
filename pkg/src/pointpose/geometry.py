"""Foundational point-cloud geometry.

Voxel downsampling, normal/curvature estimation, exact nearest-neighbor
index, Kabsch alignment, and coarse-to-fine ICP. Everything operates in
millimeters and is deterministic.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateCorrespondencesError, EmptyIndexError, NoOverlapError
from .pointcloud import PointCloud
from .pose import RigidPose


def voxel_downsample(cloud: PointCloud, leaf: float) -> PointCloud:
    """Collapse the cloud to one centroid per occupied voxel of side `leaf`.

    Positions and all present channels are averaged; normals are
    re-normalized afterwards. Voxel assignment is floor(position/leaf), so
    points exactly on a boundary belong to the higher-index voxel.
    """
    if leaf <= 0:
        raise ValueError(f"leaf must be positive, got {leaf}")
    n = len(cloud)
    if n == 0:
        return cloud.select(np.zeros(0, dtype=int))

    keys = np.floor(cloud.positions / leaf).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    nvox = len(counts)

    def mean_per_voxel(values: np.ndarray) -> np.ndarray:
        if values.ndim == 1:
            return np.bincount(inverse, weights=values, minlength=nvox) / counts
        out = np.empty((nvox, values.shape[1]))
        for c in range(values.shape[1]):
            out[:, c] = np.bincount(inverse, weights=values[:, c], minlength=nvox)
        return out / counts[:, None]

    positions = mean_per_voxel(cloud.positions)

    normals = None
    if cloud.normals is not None:
        normals = mean_per_voxel(cloud.normals)
        norms = np.linalg.norm(normals, axis=1)
        bad = norms < 1e-12
        if bad.any():
            # Cancelled-out means: fall back to the first member's normal.
            first = np.full(nvox, -1, dtype=np.int64)
            for i in range(n - 1, -1, -1):
                first[inverse[i]] = i
            normals[bad] = cloud.normals[first[bad]]
            norms = np.linalg.norm(normals, axis=1)
        normals /= norms[:, None]

    return PointCloud(
        positions=positions,
        normals=normals,
        curvatures=None if cloud.curvatures is None else mean_per_voxel(cloud.curvatures),
        colors=None if cloud.colors is None else mean_per_voxel(cloud.colors),
        view_origin=cloud.view_origin,
        intrinsics=cloud.intrinsics,
    )


def estimate_normals(cloud: PointCloud, radius: float,
                     viewpoint: Optional[np.ndarray] = None) -> PointCloud:
    """Attach PCA normals and curvature from radius neighborhoods.

    The normal is the eigenvector of the neighborhood covariance with the
    smallest eigenvalue, sign-flipped toward `viewpoint`; curvature is
    l0/(l0+l1+l2). Points with fewer than 3 neighbors (self included) get
    the unit vector toward the viewpoint and curvature 0.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if viewpoint is None:
        viewpoint = cloud.view_origin if cloud.view_origin is not None else np.zeros(3)
    viewpoint = np.asarray(viewpoint, dtype=np.float64).reshape(3)

    n = len(cloud)
    if n == 0:
        return cloud.select(np.zeros(0, dtype=int))
    pts = cloud.positions

    tree = cKDTree(pts)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    i, j = (pairs[:, 0], pairs[:, 1]) if len(pairs) else (np.zeros(0, int), np.zeros(0, int))

    counts = 1.0 + np.bincount(i, minlength=n) + np.bincount(j, minlength=n)

    def pair_sum(values: np.ndarray) -> np.ndarray:
        # sum over each point's neighborhood (self included) of `values`
        out = values.copy()
        for c in range(values.shape[1]):
            out[:, c] += np.bincount(i, weights=values[j, c], minlength=n)
            out[:, c] += np.bincount(j, weights=values[i, c], minlength=n)
        return out

    s1 = pair_sum(pts)
    xx = pts[:, :, None] * pts[:, None, :]
    s2 = pair_sum(xx.reshape(n, 9)).reshape(n, 3, 3)

    mean = s1 / counts[:, None]
    cov = s2 / counts[:, None, None] - mean[:, :, None] * mean[:, None, :]

    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending eigenvalues
    normals = eigvecs[:, :, 0]
    total = eigvals.sum(axis=1)
    curvature = np.where(total > 1e-12, eigvals[:, 0] / np.maximum(total, 1e-300), 0.0)
    curvature = np.clip(curvature, 0.0, 1.0)

    # orient toward the viewpoint
    flip = np.einsum("ij,ij->i", normals, viewpoint[None, :] - pts) < 0
    normals[flip] *= -1.0

    degenerate = (counts < 3) | (total <= 1e-12)
    if degenerate.any():
        to_vp = viewpoint[None, :] - pts[degenerate]
        norms = np.linalg.norm(to_vp, axis=1)
        fallback = np.where(norms[:, None] > 1e-12, to_vp / np.maximum(norms, 1e-300)[:, None],
                            np.array([0.0, 0.0, 1.0]))
        normals[degenerate] = fallback
        curvature[degenerate] = 0.0

    return PointCloud(
        positions=pts.copy(),
        normals=normals,
        curvatures=curvature,
        colors=None if cloud.colors is None else cloud.colors.copy(),
        view_origin=cloud.view_origin,
        intrinsics=cloud.intrinsics,
    )


class NNIndex:
    """k-d tree over point positions with brute-force-exact results.

    Queries return exactly what a linear scan would: the minimum distance,
    ties broken by the lowest point index. Read-only after construction.
    """

    def __init__(self, positions: np.ndarray):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self._tree = cKDTree(self.positions) if len(self.positions) else None

    def __len__(self) -> int:
        return len(self.positions)

    def _resolve_ties(self, queries: np.ndarray, ids: np.ndarray, dists: np.ndarray,
                      rows: np.ndarray) -> None:
        for r in rows:
            radius = dists[r] * (1 + 1e-9) + 1e-12
            cand = np.array(self._tree.query_ball_point(queries[r], radius), dtype=np.int64)
            d = np.linalg.norm(self.positions[cand] - queries[r], axis=1)
            dmin = d.min()
            ids[r] = cand[d == dmin].min()
            dists[r] = dmin

    def nearest_batch(self, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(ids, distances) of the nearest indexed point for each query row."""
        if self._tree is None:
            raise EmptyIndexError("nearest-neighbor query on an empty index")
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        k = min(2, len(self.positions))
        dists, ids = self._tree.query(queries, k=k)
        if k == 1:
            return ids.astype(np.int64).reshape(-1), dists.reshape(-1)
        best_d = dists[:, 0].copy()
        best_i = ids[:, 0].astype(np.int64)
        tied = np.nonzero(dists[:, 0] == dists[:, 1])[0]
        if len(tied):
            self._resolve_ties(queries, best_i, best_d, tied)
        return best_i, best_d

    def nearest(self, query: np.ndarray) -> Tuple[int, float]:
        ids, dists = self.nearest_batch(np.asarray(query).reshape(1, 3))
        return int(ids[0]), float(dists[0])

    def ball(self, center: np.ndarray, radius: float) -> np.ndarray:
        """Sorted indices of points within `radius` of `center` (closed ball)."""
        if self._tree is None:
            return np.zeros(0, dtype=np.int64)
        ids = self._tree.query_ball_point(np.asarray(center, dtype=np.float64).reshape(3), radius)
        return np.sort(np.asarray(ids, dtype=np.int64))


def kabsch_align(src: np.ndarray, dst: np.ndarray) -> RigidPose:
    """Least-squares rigid transform T minimizing sum |T(src_i) - dst_i|^2.

    Uses the SVD of the centered cross-covariance with a determinant sign
    fix so the rotation is always proper.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("src and dst must pair up one-to-one")
    if len(src) < 3:
        raise DegenerateCorrespondencesError(f"need at least 3 pairs, got {len(src)}")

    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    h = (src - c_src).T @ (dst - c_dst)
    u, s, vt = np.linalg.svd(h)
    if s[0] <= 0 or s[1] <= s[0] * 1e-9:
        raise DegenerateCorrespondencesError("rank-deficient correspondences (collinear or coincident)")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    translation = c_dst - rotation @ c_src
    return RigidPose(rotation, translation)


def icp_refine(model_points: np.ndarray, scene: NNIndex, init: RigidPose,
               schedule: Sequence[Tuple[float, int]],
               history_out: Optional[list] = None) -> RigidPose:
    """Coarse-to-fine ICP: shrinking correspondence gates, Kabsch re-solves.

    Per level, alternate NN pairing (gated at max_corr_dist) with a full
    re-solve until the RMS change drops below 1e-6 mm or max_iters is hit.
    An update that would increase the gated RMS is rejected and ends the
    level, so the per-level residual sequence is non-increasing. Raises
    NoOverlapError if no level ever finds 3 pairs.

    history_out, when given, receives one list of RMS values per level.
    """
    schedule = list(schedule)
    if not schedule:
        raise ValueError("schedule must not be empty")
    gates = [g for g, _ in schedule]
    if any(g <= 0 for g in gates) or any(b >= a for a, b in zip(gates, gates[1:])):
        raise ValueError("correspondence gates must be positive and strictly decreasing")

    model_points = np.asarray(model_points, dtype=np.float64).reshape(-1, 3)
    pose = init
    found_pairs = False

    for gate, max_iters in schedule:
        prev_rms = None
        level_hist: list = []
        for _ in range(max_iters):
            transformed = pose.apply(model_points)
            ids, dists = scene.nearest_batch(transformed)
            keep = dists <= gate
            if keep.sum() < 3:
                break
            found_pairs = True
            src = model_points[keep]
            dst = scene.positions[ids[keep]]
            try:
                new_pose = kabsch_align(src, dst)
            except DegenerateCorrespondencesError:
                break
            residual = new_pose.apply(src) - dst
            rms = float(np.sqrt(np.mean(np.sum(residual * residual, axis=1))))
            if prev_rms is not None and rms > prev_rms:
                break  # keep the previous (better) pose
            pose = new_pose
            level_hist.append(rms)
            if prev_rms is not None and abs(prev_rms - rms) < 1e-6:
                break
            prev_rms = rms
        if history_out is not None:
            history_out.append(level_hist)

    if not found_pairs:
        raise NoOverlapError("no schedule level found 3 gated correspondences")
    return pose
