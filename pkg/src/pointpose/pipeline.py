"""End-to-end inference and evaluation.

detect() runs the full stage chain on a scene: anchors from a voxel grid,
2048-point spheres classified for object presence, segmentation of the 16
best anchors, correspondence voting, coarse-to-fine ICP, and multi-modal
verification; the hypothesis minimizing the localization loss wins.
oracle_detect() bypasses the network with ground-truth labels to exercise
the later stages in isolation.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .dataset import label_scene
from .errors import EmptySceneError, NoHypothesisError, NoOverlapError
from .geometry import NNIndex, estimate_normals, icp_refine, voxel_downsample
from .modelprep import ObjectModel
from .network import Weights, forward, _softmax
from .pointcloud import Intrinsics, PointCloud
from .pose import RigidPose
from .verification import (VerificationParams, build_depth_buffer,
                           remove_occluded, verify)
from .voting import (Correspondences, PoseHypothesis, VotingParams,
                     correspondences_from_segmentation, estimate_pose)

STAGES = ("normals", "anchors", "classify", "segment", "vote", "icp", "verify")


@dataclass
class DetectParams:
    anchor_leaf_mm: float = 25.0
    top_anchors: int = 16
    min_sphere_points: int = 64
    n_points: int = 2048
    radius_factor: float = 0.6
    normal_radius_mm: float = 10.0
    icp_schedule: Tuple[Tuple[float, int], ...] = ((50.0, 30), (25.0, 30), (10.0, 30))
    icp_model_leaf_mm: float = 5.0
    classify_chunk: int = 64
    oracle_anchors: int = 1
    seed: int = 0
    voting: VotingParams = field(default_factory=VotingParams)
    verification: VerificationParams = field(default_factory=VerificationParams)


@dataclass
class DetectionResult:
    best: Optional[PoseHypothesis]
    ranked: List[PoseHypothesis]
    timings_ms: dict
    anchors_total: int = 0
    anchors_skipped: int = 0
    anchors_segmented: int = 0

    @property
    def failed(self) -> bool:
        return self.best is None


class _StageClock:
    def __init__(self):
        self.timings = {s: 0.0 for s in STAGES}
        self._t = time.perf_counter()

    def lap(self, stage: str):
        now = time.perf_counter()
        self.timings[stage] += (now - self._t) * 1000.0
        self._t = now


def _icp_model_points(model: ObjectModel, leaf: float) -> np.ndarray:
    """Uniform subset of real model surface points for ICP pairing.

    Voxel centroids are snapped back onto the cloud so that a correct pose
    pairs at (near-)zero distance instead of a centroid-offset floor.
    """
    centroids = voxel_downsample(model.cloud, leaf).positions
    ids, _ = NNIndex(model.cloud.positions).nearest_batch(centroids)
    return model.cloud.positions[np.unique(ids)]


def _ensure_channels(scene: PointCloud, params: DetectParams) -> PointCloud:
    if scene.normals is None:
        scene = estimate_normals(scene, params.normal_radius_mm, scene.view_origin)
    if scene.curvatures is None:
        scene = PointCloud(positions=scene.positions, normals=scene.normals,
                           curvatures=np.zeros(len(scene)), colors=scene.colors,
                           view_origin=scene.view_origin, intrinsics=scene.intrinsics)
    return scene


def _sample_sphere(ids: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(ids) >= n:
        return ids[rng.choice(len(ids), size=n, replace=False)]
    extra = ids[rng.choice(len(ids), size=n - len(ids), replace=True)]
    return np.concatenate([ids, extra])


def _sphere_features(scene: PointCloud, ids: np.ndarray, weights: Weights) -> np.ndarray:
    """Centered, scaled network inputs for one anchor sphere."""
    with_color = weights.config.input_channels == 10
    n = len(ids)
    feats = np.empty((n, weights.config.input_channels), dtype=np.float32)
    pos = scene.positions[ids]
    centered = pos - pos.mean(axis=0)
    if weights.input_scale_mm > 0:
        centered = centered / weights.input_scale_mm
    feats[:, 0:3] = centered
    feats[:, 3:6] = scene.normals[ids]
    feats[:, 6] = scene.curvatures[ids]
    if with_color:
        if scene.colors is None:
            raise ValueError("weights expect RGB input but the scene has no colors")
        feats[:, 7:10] = scene.colors[ids]
    return feats


def _finish_anchor(scene: PointCloud, scene_index: NNIndex, model: ObjectModel,
                   ids: np.ndarray, seg_probs: np.ndarray, icp_model: np.ndarray,
                   params: DetectParams, depth_buffer, clock: _StageClock
                   ) -> Optional[PoseHypothesis]:
    """Stages E-F for one anchor: vote, refine, verify."""
    corr = correspondences_from_segmentation(
        scene.positions[ids], scene.normals[ids], seg_probs, model,
        params.voting.min_confidence)
    try:
        hyp = estimate_pose(corr, params.voting)
    except NoHypothesisError:
        clock.lap("vote")
        return None
    clock.lap("vote")

    # ICP on the model points predicted visible under the voted pose: the
    # hidden back surface would otherwise pair with foreground geometry and
    # drag the refinement
    icp_points = icp_model
    if depth_buffer is not None:
        occ = remove_occluded(hyp.pose.apply(icp_model), scene,
                              params.verification, depth_buffer)
        if occ.visible_mask.sum() >= 16:
            icp_points = icp_model[occ.visible_mask]
    try:
        refined = icp_refine(icp_points, scene_index, hyp.pose, params.icp_schedule)
        hyp = replace(hyp, pose=refined)
    except NoOverlapError:
        pass  # keep the voted pose
    clock.lap("icp")

    hyp = verify(hyp, model, scene, params.verification,
                 scene_index=scene_index, depth_buffer=depth_buffer)
    clock.lap("verify")
    return hyp


def _rank(hypotheses: List[PoseHypothesis]) -> List[PoseHypothesis]:
    order = sorted(range(len(hypotheses)), key=lambda i: (hypotheses[i].l_loc, i))
    return [hypotheses[i] for i in order]


def _label_palette(k: int) -> np.ndarray:
    """Deterministic distinct-ish colors for labels 0..k (0 = black)."""
    palette = np.zeros((k + 1, 3))
    idx = np.arange(1, k + 1)
    palette[1:, 0] = (idx * 37 % 97) / 96.0
    palette[1:, 1] = (idx * 59 % 83) / 82.0
    palette[1:, 2] = (idx * 17 % 71) / 70.0
    return palette


def _write_debug_stages(debug_dir, dbg: dict, result: "DetectionResult") -> None:
    """Per-stage artifacts A-F mirroring the inference chain."""
    from pathlib import Path

    from .ply import write_ply
    from .pose import pose_to_dict
    import json as _json

    debug_dir = Path(debug_dir)
    debug_dir.mkdir(parents=True, exist_ok=True)
    write_ply(debug_dir / "A_anchors.ply", PointCloud(positions=dbg["anchors"]))

    scored_pos, scored_probs = dbg["scored"]
    heat = np.zeros((len(scored_pos), 3))
    heat[:, 0] = scored_probs
    heat[:, 2] = 1.0 - scored_probs
    write_ply(debug_dir / "B_scores.ply",
              PointCloud(positions=scored_pos, colors=heat))

    write_ply(debug_dir / "C_top_spheres.ply", PointCloud(positions=dbg["spheres"]))

    seg_pos, seg_labels, k = dbg["segmentation"]
    palette = _label_palette(k)
    write_ply(debug_dir / "D_segmentation.ply",
              PointCloud(positions=seg_pos, colors=palette[seg_labels]))

    write_ply(debug_dir / "E_votes.ply", PointCloud(positions=dbg["votes"]))

    payload = {"timings_ms": result.timings_ms,
               "anchors_total": result.anchors_total,
               "anchors_segmented": result.anchors_segmented,
               "hypotheses": []}
    for h in result.ranked:
        payload["hypotheses"].append({
            "pose": pose_to_dict(h.pose), "l_loc": h.l_loc, "s_kde": h.s_kde,
            "l_geometric": h.l_geometric, "l_color": h.l_color,
            "vote_support": h.vote_support, "visible_count": h.visible_count,
        })
    with open(debug_dir / "F_pose.json", "w") as f:
        _json.dump(payload, f, indent=2)


def _best_anchor_votes(scene: PointCloud, ids: np.ndarray, seg_probs: np.ndarray,
                       model: ObjectModel, params: DetectParams) -> np.ndarray:
    """Vote translations for one anchor (debug dump only)."""
    from .voting import pose_votes
    corr = correspondences_from_segmentation(
        scene.positions[ids], scene.normals[ids], seg_probs, model,
        params.voting.min_confidence)
    if len(corr) == 0:
        return np.zeros((0, 3))
    if len(corr) > params.voting.max_correspondences:
        rng = np.random.default_rng(params.voting.subsample_seed)
        keep = np.sort(rng.choice(len(corr), params.voting.max_correspondences,
                                  replace=False))
        corr = corr.subset(keep)
    return pose_votes(corr, params.voting.n_theta).translations


def detect(scene: PointCloud, model: ObjectModel, weights: Weights,
           params: DetectParams = DetectParams(), debug_dir=None) -> DetectionResult:
    """Full pipeline on one scene; hypotheses ranked by localization loss."""
    if len(scene) == 0:
        raise EmptySceneError("detection on an empty scene")
    clock = _StageClock()
    scene = _ensure_channels(scene, params)
    clock.lap("normals")

    anchors = voxel_downsample(scene, params.anchor_leaf_mm).positions
    scene_index = NNIndex(scene.positions)
    radius = params.radius_factor * model.diameter

    sphere_ids: List[Optional[np.ndarray]] = []
    feats = np.zeros((len(anchors), params.n_points, weights.config.input_channels),
                     dtype=np.float32)
    kept = 0
    skipped = 0
    for ai, anchor in enumerate(anchors):
        ids = scene_index.ball(anchor, radius)
        if len(ids) < params.min_sphere_points:
            skipped += 1
            sphere_ids.append(None)
            continue
        rng = np.random.default_rng([params.seed, ai])
        chosen = _sample_sphere(ids, params.n_points, rng)
        feats[ai] = _sphere_features(scene, chosen, weights)
        sphere_ids.append(chosen)
        kept += 1
    clock.lap("anchors")

    usable = np.array([i for i, s in enumerate(sphere_ids) if s is not None], dtype=int)
    if len(usable) == 0:
        raise EmptySceneError(f"no anchor sphere held {params.min_sphere_points} points")

    probs = np.empty(len(usable), dtype=np.float64)
    for start in range(0, len(usable), params.classify_chunk):
        chunk = usable[start:start + params.classify_chunk]
        out = forward(weights, feats[chunk], want_seg=False)
        probs[start:start + len(chunk)] = out.class_prob
    clock.lap("classify")

    # 16 highest scores; ties resolve to the lowest anchor index
    order = np.lexsort((usable, -probs))
    top = usable[order[:params.top_anchors]]
    seg = forward(weights, feats[top], want_seg=True)
    seg_probs = _softmax(seg.seg_logits.astype(np.float64))
    clock.lap("segment")

    icp_model = _icp_model_points(model, params.icp_model_leaf_mm)
    depth_buffer = build_depth_buffer(scene, params.verification.splat_px) \
        if scene.intrinsics is not None else None

    hypotheses = []
    hyp_anchor = []
    for k, ai in enumerate(top):
        hyp = _finish_anchor(scene, scene_index, model, sphere_ids[ai], seg_probs[k],
                             icp_model, params, depth_buffer, clock)
        if hyp is not None:
            hypotheses.append(hyp)
            hyp_anchor.append(k)

    ranked = _rank(hypotheses)
    result = DetectionResult(best=ranked[0] if ranked else None, ranked=ranked,
                             timings_ms=clock.timings, anchors_total=len(anchors),
                             anchors_skipped=skipped, anchors_segmented=len(top))

    if debug_dir is not None:
        best_k = hyp_anchor[int(np.argmin([h.l_loc for h in hypotheses]))] \
            if hypotheses else 0
        sphere_pts = np.concatenate([scene.positions[sphere_ids[ai]] for ai in top])
        seg_pts = scene.positions[sphere_ids[top[best_k]]]
        seg_lab = np.argmax(seg_probs[best_k], axis=1)
        dbg = {
            "anchors": anchors,
            "scored": (anchors[usable], probs),
            "spheres": sphere_pts,
            "segmentation": (seg_pts, seg_lab, model.k),
            "votes": _best_anchor_votes(scene, sphere_ids[top[best_k]],
                                        seg_probs[best_k], model, params),
        }
        _write_debug_stages(debug_dir, dbg, result)
    return result


def oracle_detect(scene: PointCloud, model: ObjectModel, gt_pose: RigidPose,
                  params: DetectParams = DetectParams(), debug_dir=None) -> DetectionResult:
    """Stages E-F with ground-truth segmentation at random foreground anchors.

    Bypasses the network entirely: anchor spheres get one-hot probabilities
    from the scene labeling, isolating voting + ICP + verification.
    """
    if len(scene) == 0:
        raise EmptySceneError("detection on an empty scene")
    clock = _StageClock()
    scene = _ensure_channels(scene, params)
    labels = label_scene(scene, model, gt_pose)
    clock.lap("normals")

    fg = np.nonzero(labels.foreground_mask)[0]
    scene_index = NNIndex(scene.positions)
    clock.lap("anchors")
    if len(fg) == 0:
        return DetectionResult(best=None, ranked=[], timings_ms=clock.timings,
                               anchors_total=0, anchors_skipped=0, anchors_segmented=0)

    rng = np.random.default_rng([params.seed, 0xFACE])
    radius = params.radius_factor * model.diameter
    icp_model = _icp_model_points(model, params.icp_model_leaf_mm)
    depth_buffer = build_depth_buffer(scene, params.verification.splat_px) \
        if scene.intrinsics is not None else None

    hypotheses = []
    n_anchors = 0
    oracle_dumps = []
    for _ in range(params.oracle_anchors):
        anchor = scene.positions[fg[rng.integers(len(fg))]]
        ids = scene_index.ball(anchor, radius)
        ids = ids[labels.labels[ids] >= 0]  # exclude the discard band
        if len(ids) < params.min_sphere_points:
            continue
        chosen = _sample_sphere(ids, params.n_points, rng)
        point_labels = np.maximum(labels.labels[chosen], 0)
        one_hot = np.zeros((len(chosen), model.k + 1))
        one_hot[np.arange(len(chosen)), point_labels] = 1.0
        clock.lap("segment")
        n_anchors += 1
        if debug_dir is not None:
            oracle_dumps.append((anchor, chosen, one_hot, point_labels))
        hyp = _finish_anchor(scene, scene_index, model, chosen, one_hot,
                             icp_model, params, depth_buffer, clock)
        if hyp is not None:
            hypotheses.append(hyp)

    ranked = _rank(hypotheses)
    result = DetectionResult(best=ranked[0] if ranked else None, ranked=ranked,
                             timings_ms=clock.timings, anchors_total=n_anchors,
                             anchors_skipped=params.oracle_anchors - n_anchors,
                             anchors_segmented=n_anchors)
    if debug_dir is not None and oracle_dumps:
        anchor, chosen, one_hot, point_labels = oracle_dumps[0]
        dbg = {
            "anchors": np.asarray([anchor]),
            "scored": (np.asarray([anchor]), np.ones(1)),
            "spheres": scene.positions[chosen],
            "segmentation": (scene.positions[chosen], point_labels, model.k),
            "votes": _best_anchor_votes(scene, chosen, one_hot, model, params),
        }
        _write_debug_stages(debug_dir, dbg, result)
    return result


# ---------------------------------------------------------------------------
# metrics


def add_metric(est: RigidPose, gt: RigidPose, model: ObjectModel) -> float:
    """Mean distance between model points under the two poses."""
    if len(model.cloud) == 0:
        raise ValueError("model cloud is empty")
    d = np.linalg.norm(est.apply(model.cloud.positions)
                       - gt.apply(model.cloud.positions), axis=1)
    return float(d.mean())


def adds_metric(est: RigidPose, gt: RigidPose, model: ObjectModel) -> float:
    """Symmetric variant: mean nearest-point distance to the gt-posed cloud."""
    if len(model.cloud) == 0:
        raise ValueError("model cloud is empty")
    gt_index = NNIndex(gt.apply(model.cloud.positions))
    _, d = gt_index.nearest_batch(est.apply(model.cloud.positions))
    return float(d.mean())


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class SceneRecord:
    scene_id: str
    add: float
    adds: float
    l_loc: float
    s_kde: float
    success: bool
    timings_ms: dict


@dataclass
class EvaluationReport:
    records: List[SceneRecord]
    threshold_factor: float
    diameter: float

    @property
    def success_fraction(self) -> float:
        if not self.records:
            return 0.0
        return sum(r.success for r in self.records) / len(self.records)

    def to_csv(self, include_timings: bool = True) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        header = ["scene_id", "add_mm", "adds_mm", "l_loc", "s_kde", "success"]
        if include_timings:
            header += [f"{s}_ms" for s in STAGES]
        writer.writerow(header)
        for r in self.records:
            row = [r.scene_id, repr(r.add), repr(r.adds), repr(r.l_loc),
                   repr(r.s_kde), int(r.success)]
            if include_timings:
                row += [f"{r.timings_ms.get(s, 0.0):.3f}" for s in STAGES]
            writer.writerow(row)
        return out.getvalue()

    def summary(self) -> dict:
        return {
            "scenes": len(self.records),
            "successes": int(sum(r.success for r in self.records)),
            "success_fraction": self.success_fraction,
            "threshold_factor": self.threshold_factor,
            "threshold_mm": self.threshold_factor * self.diameter,
            "mean_add_mm": float(np.mean([r.add for r in self.records]))
            if self.records else None,
        }


def evaluate_scene(scene: PointCloud, gt: RigidPose, model: ObjectModel,
                   weights: Optional[Weights], params: DetectParams,
                   threshold_factor: float, scene_id: str = "scene",
                   use_oracle: bool = False) -> SceneRecord:
    if use_oracle or weights is None:
        result = oracle_detect(scene, model, gt, params)
    else:
        result = detect(scene, model, weights, params)
    symmetric = model.symmetry.kind != "none"
    if result.failed:
        return SceneRecord(scene_id=scene_id, add=float("inf"), adds=float("inf"),
                           l_loc=float("inf"), s_kde=0.0, success=False,
                           timings_ms=result.timings_ms)
    best = result.best
    a = add_metric(best.pose, gt, model)
    s = adds_metric(best.pose, gt, model)
    err = s if symmetric else a
    return SceneRecord(scene_id=scene_id, add=a, adds=s, l_loc=best.l_loc,
                       s_kde=best.s_kde, success=bool(err < threshold_factor * model.diameter),
                       timings_ms=result.timings_ms)


def evaluate(scenes: Sequence[Tuple[str, PointCloud, RigidPose]], model: ObjectModel,
             weights: Optional[Weights], params: DetectParams = DetectParams(),
             threshold_factor: float = 0.1, use_oracle: bool = False,
             progress=None) -> EvaluationReport:
    """Detect on every (id, cloud, gt) scene; success = ADD (ADD-S when the
    model is symmetric) below threshold_factor x diameter."""
    records = []
    for i, (scene_id, cloud, gt) in enumerate(scenes):
        records.append(evaluate_scene(cloud, gt, model, weights, params,
                                      threshold_factor, scene_id, use_oracle))
        if progress is not None:
            progress(i + 1, len(scenes), records[-1])
    return EvaluationReport(records=records, threshold_factor=threshold_factor,
                            diameter=model.diameter)


# ---------------------------------------------------------------------------
# RGB-D ingestion


def backproject_rgbd(depth_mm: np.ndarray, rgb: Optional[np.ndarray],
                     intrinsics: Intrinsics) -> PointCloud:
    """Pinhole back-projection of a u16 depth image (mm) with optional RGB."""
    depth_mm = np.asarray(depth_mm)
    if depth_mm.shape != (intrinsics.height, intrinsics.width):
        raise ValueError(f"depth image {depth_mm.shape} does not match intrinsics "
                         f"({intrinsics.height}, {intrinsics.width})")
    if rgb is not None and rgb.shape[:2] != depth_mm.shape:
        raise ValueError("rgb and depth dimensions differ")

    v, u = np.nonzero(depth_mm > 0)
    z = depth_mm[v, u].astype(np.float64)
    x = (u - intrinsics.cx) * z / intrinsics.fx
    y = (v - intrinsics.cy) * z / intrinsics.fy
    colors = None
    if rgb is not None:
        colors = rgb[v, u].astype(np.float64)
        if rgb.dtype == np.uint8:
            colors = colors / 255.0
    return PointCloud(positions=np.stack([x, y, z], axis=1), colors=colors,
                      view_origin=np.zeros(3), intrinsics=intrinsics)
