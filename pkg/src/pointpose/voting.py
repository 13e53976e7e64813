"""Pose hypotheses from segmentation output via correspondence voting.

Each scene point labeled with a model keypoint pins that keypoint to the
point and its normal to the scene normal, leaving one free rotation about
the scene normal. Sampling that angle yields a family of rigid-pose votes
per correspondence; a kernel density peak over all votes in SE(3) gives
the hypothesis, scored by the fraction of votes that support it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateCorrespondencesError, NoHypothesisError
from .geometry import kabsch_align
from .modelprep import ObjectModel
from .pose import RigidPose

_X = np.array([1.0, 0.0, 0.0])
_Y = np.array([0.0, 1.0, 0.0])


@dataclass
class VotingParams:
    n_theta: int = 36
    delta_t_mm: float = 10.0
    delta_r_deg: float = 12.0
    min_correspondences: int = 10
    max_correspondences: int = 500
    min_confidence: float = 0.0
    subsample_seed: int = 0

    @property
    def delta_r_rad(self) -> float:
        return float(np.radians(self.delta_r_deg))


@dataclass
class Correspondences:
    """Column-wise store of scene-point -> model-keypoint matches."""

    scene_positions: np.ndarray    # (M, 3) mm, scene frame
    scene_normals: np.ndarray      # (M, 3) unit
    keypoint_ids: np.ndarray       # (M,) in 1..K
    keypoint_positions: np.ndarray  # (M, 3) mm, model frame
    keypoint_normals: np.ndarray   # (M, 3) unit
    confidences: np.ndarray        # (M,) in (0, 1]

    def __len__(self) -> int:
        return len(self.scene_positions)

    def subset(self, idx) -> "Correspondences":
        return Correspondences(self.scene_positions[idx], self.scene_normals[idx],
                               self.keypoint_ids[idx], self.keypoint_positions[idx],
                               self.keypoint_normals[idx], self.confidences[idx])


@dataclass
class PoseHypothesis:
    pose: RigidPose
    s_kde: float
    vote_support: int
    l_geometric: Optional[float] = None
    l_color: Optional[float] = None
    l_loc: Optional[float] = None
    color_fallback: bool = False
    occlusion_fallback: bool = False
    visible_count: Optional[int] = None


@dataclass
class VoteSet:
    rotations: np.ndarray     # (V, 3, 3)
    translations: np.ndarray  # (V, 3)
    source: np.ndarray        # (V,) correspondence index

    def __len__(self) -> int:
        return len(self.source)


def correspondences_from_segmentation(scene_positions: np.ndarray,
                                      scene_normals: np.ndarray,
                                      seg_probs: np.ndarray,
                                      model: ObjectModel,
                                      min_confidence: float = 0.0) -> Correspondences:
    """Emit one correspondence per point whose argmax label is a keypoint.

    seg_probs rows are (K+1) probabilities with column 0 = background.
    Points keep their scene-frame (un-centered) positions.
    """
    seg_probs = np.asarray(seg_probs)
    if seg_probs.shape[1] != model.k + 1:
        raise ValueError(f"seg_probs has {seg_probs.shape[1]} columns, expected {model.k + 1}")
    labels = np.argmax(seg_probs, axis=1)
    conf = seg_probs[np.arange(len(labels)), labels]
    keep = (labels > 0) & (conf >= min_confidence)

    ids = labels[keep]
    kp_pos = model.keypoint_positions()
    kp_nrm = model.keypoint_normals()
    return Correspondences(
        scene_positions=np.asarray(scene_positions, dtype=np.float64)[keep],
        scene_normals=np.asarray(scene_normals, dtype=np.float64)[keep],
        keypoint_ids=ids.astype(np.int32),
        keypoint_positions=kp_pos[ids - 1],
        keypoint_normals=kp_nrm[ids - 1],
        confidences=conf[keep].astype(np.float64),
    )


def _rodrigues_batch(axes: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit axes (..., 3) and angles (...)."""
    c = np.cos(angles)[..., None, None]
    s = np.sin(angles)[..., None, None]
    a = axes
    outer = a[..., :, None] * a[..., None, :]
    zeros = np.zeros_like(angles)
    skew = np.stack([
        np.stack([zeros, -a[..., 2], a[..., 1]], axis=-1),
        np.stack([a[..., 2], zeros, -a[..., 0]], axis=-1),
        np.stack([-a[..., 1], a[..., 0], zeros], axis=-1),
    ], axis=-2)
    eye = np.broadcast_to(np.eye(3), outer.shape)
    return c * eye + s * skew + (1.0 - c) * outer


def _base_rotations(kp_normals: np.ndarray, scene_normals: np.ndarray) -> np.ndarray:
    """Minimal rotations mapping each keypoint normal onto its scene normal.

    Anti-parallel pairs rotate by pi about normalize(scene_normal x x_hat),
    falling back to the y axis cross product when degenerate.
    """
    a, b = kp_normals, scene_normals
    cross = np.cross(a, b)
    sin = np.linalg.norm(cross, axis=1)
    cos = np.einsum("ij,ij->i", a, b)
    angles = np.arctan2(sin, cos)

    axes = np.zeros_like(a)
    regular = sin > 1e-12
    axes[regular] = cross[regular] / sin[regular, None]

    anti = (~regular) & (cos < 0)
    if anti.any():
        alt = np.cross(b[anti], _X)
        alt_norm = np.linalg.norm(alt, axis=1)
        bad = alt_norm < 1e-9
        if bad.any():
            alt[bad] = np.cross(b[anti][bad], _Y)
            alt_norm = np.linalg.norm(alt, axis=1)
        axes[anti] = alt / alt_norm[:, None]
        angles[anti] = np.pi

    parallel = (~regular) & (cos >= 0)
    axes[parallel] = _X  # angle ~ 0: axis is irrelevant
    angles[parallel] = 0.0
    return _rodrigues_batch(axes, angles)


def pose_votes(corr: Correspondences, n_theta: int = 36) -> VoteSet:
    """The 1-DoF pose family of each correspondence, sampled at n_theta angles.

    Every emitted vote maps the keypoint exactly onto the scene point and
    the keypoint normal exactly onto the scene normal.
    """
    if n_theta < 4:
        raise ValueError("n_theta must be at least 4")
    m = len(corr)
    if m == 0:
        return VoteSet(np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int32))

    base = _base_rotations(corr.keypoint_normals, corr.scene_normals)  # (M, 3, 3)
    thetas = 2.0 * np.pi * np.arange(n_theta) / n_theta
    spin = _rodrigues_batch(
        np.broadcast_to(corr.scene_normals[:, None, :], (m, n_theta, 3)),
        np.broadcast_to(thetas[None, :], (m, n_theta)),
    )  # (M, T, 3, 3)
    rotations = np.einsum("mtij,mjk->mtik", spin, base)
    translations = corr.scene_positions[:, None, :] - np.einsum(
        "mtij,mj->mti", rotations, corr.keypoint_positions)
    source = np.repeat(np.arange(m, dtype=np.int32), n_theta)
    return VoteSet(rotations=rotations.reshape(-1, 3, 3),
                   translations=translations.reshape(-1, 3),
                   source=source)


def _mean_rotation(rotations: np.ndarray) -> np.ndarray:
    """Chordal mean: average matrix projected back onto SO(3)."""
    m = rotations.mean(axis=0)
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def density_peak(votes: VoteSet, delta_t_mm: float = 10.0,
                 delta_r_rad: float = 0.20943951023931953,
                 return_supporters: bool = False):
    """Max-support vote under translation/rotation kernels.

    Support of a vote = number of votes within delta_t translation AND
    delta_r geodesic rotation distance. Ties break toward the smaller
    summed translation distance, then the lowest vote index. The returned
    pose is the mean translation and chordal-mean rotation over the
    winner's supporters; s_kde = support / |votes|.

    A translation voxel hash (side delta_t) plus a 27-neighborhood bound
    per voxel prunes candidates exactly.
    """
    v = len(votes)
    if v == 0:
        raise NoHypothesisError("no votes to cluster")
    trans = votes.translations
    rots = votes.rotations

    # |q_i . q_j| >= cos(delta_r/2) is the same boundary as the geodesic
    # trace test but needs 4 components per vote instead of 9
    from scipy.spatial import cKDTree
    from scipy.spatial.transform import Rotation
    q_gate = np.cos(delta_r_rad / 2.0)
    quats_all = Rotation.from_matrix(rots).as_quat().astype(np.float64)
    if quats_all.ndim == 1:
        quats_all = quats_all[None, :]

    # the rotation-neighbor count is a cheap upper bound on the true
    # support (translation clusters are far denser than rotation clusters
    # for surface-sampled votes); votes are evaluated exactly in
    # descending-bound order until the bound cannot reach the best support
    tree = cKDTree(trans)
    q_radius = np.sqrt(max(2.0 - 2.0 * q_gate, 0.0))  # |q - q'| for geodesic delta_r
    q_tree = cKDTree(quats_all)
    bound = q_tree.query_ball_point(quats_all, q_radius, return_length=True,
                                    workers=-1)
    bound = bound + q_tree.query_ball_point(-quats_all, q_radius,
                                            return_length=True, workers=-1)

    best = (0, -np.inf, -1)  # (support, -sum_dist, -original_index) maximized
    best_supporters = None
    for c in np.lexsort((np.arange(v), -bound)):
        if bound[c] < best[0]:
            break
        nb = np.asarray(tree.query_ball_point(trans[c], delta_t_mm), dtype=np.int64)
        d = np.linalg.norm(trans[nb] - trans[c], axis=1)
        mask = (d <= delta_t_mm) & (np.abs(quats_all[nb] @ quats_all[c]) >= q_gate)
        score = (int(mask.sum()), -float(d[mask].sum()), -int(c))
        if score > best:
            best = score
            best_supporters = nb[mask]

    supporters = best_supporters
    pose = RigidPose(_mean_rotation(rots[supporters]),
                     trans[supporters].mean(axis=0))
    hyp = PoseHypothesis(pose=pose, s_kde=best[0] / v, vote_support=best[0])
    if return_supporters:
        return hyp, supporters
    return hyp


def estimate_pose(corr: Correspondences,
                  params: VotingParams = VotingParams()) -> PoseHypothesis:
    """Vote, find the density peak, and polish with least squares.

    The polish re-solves the rigid transform over the unique correspondences
    whose votes support the peak; fewer than 3 usable pairs keep the peak
    pose as-is.
    """
    if len(corr) < params.min_correspondences:
        raise NoHypothesisError(
            f"{len(corr)} correspondences < {params.min_correspondences} required")

    if len(corr) > params.max_correspondences:
        rng = np.random.default_rng(params.subsample_seed)
        idx = np.sort(rng.choice(len(corr), size=params.max_correspondences, replace=False))
        corr = corr.subset(idx)

    votes = pose_votes(corr, params.n_theta)
    hyp, supporters = density_peak(votes, params.delta_t_mm, params.delta_r_rad,
                                   return_supporters=True)

    support_corr = np.unique(votes.source[supporters])
    if len(support_corr) >= 3:
        try:
            hyp.pose = kabsch_align(corr.keypoint_positions[support_corr],
                                    corr.scene_positions[support_corr])
        except DegenerateCorrespondencesError:
            pass
    return hyp
