"""Synthetic data, evaluation metrics and the initialisation comparison."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .articulate import (ArticulationConfig, FitState, KamaTrace, KeypointSet, estimate_global_rotations,
                         fit_global_scale_translation, fit_keypoints, fit_vertices, kama,
                         map_to_model_pose, remove_twist)
from .errors import InvalidSpec, SizeMismatch
from .geom3d import CameraIntrinsics, Rotation, geodesic_angle, perspective_project, procrustes_align, swing_twist_decompose
from .io import FrameRecord
from .model import KinematicTree, Pose, SkinnedModel
from .refine import RefineConfig, RefineResult, refine

MAX_JOINT_RANGE = np.pi


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic dataset.

    Ground-truth joints are sampled only where the keypoints can determine
    them (joints mapped from non-leaf keypoints); everything else stays at
    rest.  ``twist_range`` adds a random twist about the bone to single-child
    joints.  Confidence of a keypoint is ``exp(-|noise| / confidence_scale)``.
    """

    num_frames: int = 20
    root_range: float = np.pi
    joint_range: float = 0.8
    joint_ranges: Mapping[str, float] = field(default_factory=dict)
    twist_range: float = 0.0
    sigma_3d: float = 0.0
    sigma_2d: float = 0.0
    confidence_scale: float = 0.02
    scale_range: tuple[float, float] = (0.9, 1.1)
    translation_low: tuple[float, float, float] = (-0.3, -0.3, 2.5)
    translation_high: tuple[float, float, float] = (0.3, 0.3, 4.0)
    beta_sigma: float = 0.0
    camera: Optional[CameraIntrinsics] = CameraIntrinsics(1000.0, 1000.0, 512.0, 512.0)
    seed: int = 0

    def __post_init__(self):
        if self.num_frames < 0:
            raise InvalidSpec("num_frames must be >= 0")
        ranges = [self.root_range, self.joint_range, self.twist_range, *self.joint_ranges.values()]
        if any(not 0 <= r <= MAX_JOINT_RANGE for r in ranges):
            raise InvalidSpec("angle ranges must lie in [0, pi]")
        if min(self.sigma_3d, self.sigma_2d, self.beta_sigma) < 0:
            raise InvalidSpec("noise levels must be >= 0")
        if not self.confidence_scale > 0:
            raise InvalidSpec("confidence_scale must be > 0")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise InvalidSpec("scale_range must satisfy 0 < low <= high")
        if any(a > b for a, b in zip(self.translation_low, self.translation_high)):
            raise InvalidSpec("translation_low must not exceed translation_high")
        if self.camera is not None and self.translation_low[2] < 1.0:
            raise InvalidSpec("with a camera the body must stay at least 1 m in front of it")

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthSpec":
        if not isinstance(doc, dict):
            raise InvalidSpec("spec must be an object")
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise InvalidSpec(f"unknown spec fields: {sorted(extra)}")
        kw = dict(doc)
        if "camera" in kw and kw["camera"] is not None:
            try:
                kw["camera"] = CameraIntrinsics(**kw["camera"])
            except (TypeError, ValueError) as exc:
                raise InvalidSpec(f"bad camera: {exc}") from exc
        for key in ("scale_range", "translation_low", "translation_high"):
            if key in kw:
                kw[key] = tuple(kw[key])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["joint_ranges"] = dict(self.joint_ranges)
        return d


@dataclass
class SynthData:
    frames: list[FrameRecord]
    ground_truth: list[FitState]

    def __len__(self):
        return len(self.frames)


def estimable_joints(tree: KinematicTree) -> dict[int, int]:
    """Joint -> keypoint for joints whose rotation the keypoints determine."""
    return {j: k for k, j in tree.keypoint_map if j is not None and tree.keypoint_children[k]}


def _bone_axis(model: SkinnedModel, k: int) -> Optional[np.ndarray]:
    kids = model.tree.keypoint_children[k]
    if len(kids) != 1:
        return None
    d = model.canonical_keypoints[kids[0]] - model.canonical_keypoints[k]
    return d / np.linalg.norm(d)


def _random_rotation(rng, max_angle: float) -> Rotation:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Rotation.from_axis_angle(axis * rng.uniform(0.0, max_angle))


def sample_pose(model: SkinnedModel, spec: SynthSpec, rng) -> Pose:
    tree = model.tree
    rots = [Rotation.identity()] * tree.num_joints
    for j, k in sorted(estimable_joints(tree).items()):
        name = tree.joint_names[j]
        limit = spec.joint_ranges.get(name, spec.root_range if j == 0 else spec.joint_range)
        r = _random_rotation(rng, limit)
        axis = _bone_axis(model, k)
        if axis is not None:
            r, _ = swing_twist_decompose(r, axis)
            if spec.twist_range > 0:
                r = r * Rotation.from_axis_angle(axis * rng.uniform(-spec.twist_range, spec.twist_range))
        rots[j] = r
    return Pose(tuple(rots))


def synth_generate(model: SkinnedModel, spec: SynthSpec) -> SynthData:
    rng = np.random.default_rng(spec.seed)
    frames, truth = [], []
    lo, hi = np.array(spec.translation_low), np.array(spec.translation_high)
    for i in range(spec.num_frames):
        pose = sample_pose(model, spec, rng)
        beta = rng.normal(0.0, spec.beta_sigma, model.num_betas) if spec.beta_sigma > 0 else np.zeros(model.num_betas)
        s = rng.uniform(*spec.scale_range)
        t = rng.uniform(lo, hi)
        gt = FitState(pose, beta, s, t)
        clean = fit_keypoints(model, gt)
        noise = rng.normal(0.0, spec.sigma_3d, clean.shape) if spec.sigma_3d > 0 else np.zeros_like(clean)
        conf = np.exp(-np.linalg.norm(noise, axis=1) / spec.confidence_scale)
        uv = None
        if spec.camera is not None:
            uv = perspective_project(spec.camera, clean)
            if spec.sigma_2d > 0:
                uv = uv + rng.normal(0.0, spec.sigma_2d, uv.shape)
        frames.append(FrameRecord(i, KeypointSet(clean + noise, conf, uv), spec.camera))
        truth.append(gt)
    return SynthData(frames, truth)


def inject_twist(locals_: Sequence[Rotation], tree: KinematicTree, canonical, angles) -> list[Rotation]:
    """Add a twist about the bone of every single-child keypoint.

    ``angles[k]`` is the twist for keypoint ``k`` (ignored elsewhere).  The
    inverse twist is pre-multiplied into the non-leaf children, so every
    keypoint position is unchanged while the mesh around the bone rotates.
    """
    canonical = np.asarray(canonical, dtype=float)
    out = list(locals_)
    kids = tree.keypoint_children
    for k in range(tree.num_keypoints):
        if len(kids[k]) != 1:
            continue
        d = canonical[kids[k][0]] - canonical[k]
        tw = Rotation.from_axis_angle(d / np.linalg.norm(d) * angles[k])
        out[k] = out[k] * tw
        if kids[kids[k][0]]:
            out[kids[k][0]] = tw.inverse() * out[kids[k][0]]
    return out


@dataclass
class TwistTrial:
    keypoint_shift: float   # max keypoint displacement caused by removal (m)
    vertex_shift: float     # mean vertex displacement caused by removal (m)
    mpve_before: float      # mm, against ground truth
    mpve_after: float


def twist_removal_study(model: SkinnedModel, spec: SynthSpec, max_twist: float = np.pi / 2) -> list[TwistTrial]:
    """Remove spurious bone twists from analytic estimates and measure the effect.

    For each frame the analytic local rotations are computed without twist
    removal, then a random twist in ``[-max_twist, max_twist]`` is injected on
    every single-child keypoint (keypoints unchanged, mesh twisted).  The
    mesh is compared against ground truth before and after removal.
    """
    data = synth_generate(model, spec)
    rng = np.random.default_rng(spec.seed + 7919)
    tree, can = model.tree, model.canonical_keypoints
    out = []
    for fr, gt in zip(data.frames, data.ground_truth):
        tr = KamaTrace(None)
        base = kama(model, fr.keypoints, ArticulationConfig(remove_twist=False), tr)
        twisted = inject_twist(tr.locals_raw, tree, can, rng.uniform(-max_twist, max_twist, tree.num_keypoints))
        cleaned = remove_twist(twisted, tree, can, tr.estimate.bone_child)
        states = []
        for rots in (twisted, cleaned):
            pose, src = map_to_model_pose(rots, tree, tr.estimate.tags)
            states.append(FitState(pose, base.beta, base.scale, base.translation, src))
        kb, ka = (fit_keypoints(model, st) for st in states)
        vb, va = (fit_vertices(model, st) for st in states)
        vg = fit_vertices(model, gt)
        out.append(TwistTrial(float(np.max(np.linalg.norm(kb - ka, axis=1))),
                              float(np.mean(np.linalg.norm(vb - va, axis=1))),
                              metric_mpve(vb, vg), metric_mpve(va, vg)))
    return out


# Metrics ------------------------------------------------------------------

def _pairs(pred, gt):
    p = np.asarray(pred, dtype=float)
    g = np.asarray(gt, dtype=float)
    if p.shape != g.shape or p.ndim != 2 or p.shape[1] != 3:
        raise SizeMismatch(f"prediction {p.shape} and ground truth {g.shape} must both be (N, 3)")
    if len(p) == 0:
        raise SizeMismatch("no points to compare")
    return p, g


def metric_mpve(pred_vertices, gt_vertices) -> float:
    p, g = _pairs(pred_vertices, gt_vertices)
    return 1000.0 * float(np.mean(np.linalg.norm(p - g, axis=1)))


def metric_mpjpe(pred_kps, gt_kps) -> float:
    p, g = _pairs(pred_kps, gt_kps)
    return 1000.0 * float(np.mean(np.linalg.norm(p - g, axis=1)))


def metric_pa_mpjpe(pred_kps, gt_kps) -> float:
    """MPJPE after the best similarity transform of the prediction onto ``gt``."""
    p, g = _pairs(pred_kps, gt_kps)
    r, s, t = procrustes_align(p, g)
    return metric_mpjpe(s * r.apply(p) + t, g)


@dataclass
class EvalReport:
    frame_ids: list[int]
    mpve: list[float]
    mpjpe: list[float]
    pa_mpjpe: list[float]
    # per frame, per joint (rad); NaN for joints at rest in both
    rotation_error: list[list[float]]
    timings_ms: list[float] = field(default_factory=list)

    def _mean(self, xs):
        return float(np.mean(xs)) if len(xs) else float("nan")

    @property
    def aggregate(self) -> dict:
        rot = np.array(self.rotation_error, dtype=float).reshape(-1)
        return {
            "mpve": self._mean(self.mpve),
            "mpjpe": self._mean(self.mpjpe),
            "pa_mpjpe": self._mean(self.pa_mpjpe),
            "rotation_error": float(np.nanmean(rot)) if np.any(np.isfinite(rot)) else float("nan"),
            "timing_ms": self._mean(self.timings_ms),
            "num_frames": len(self.frame_ids),
        }

    def to_dict(self) -> dict:
        def clean(x):
            return None if not np.isfinite(x) else float(x)
        return {
            "aggregate": {k: (clean(v) if isinstance(v, float) else v) for k, v in self.aggregate.items()},
            "frames": [
                {"frame_id": fid, "mpve": a, "mpjpe": b, "pa_mpjpe": c,
                 "rotation_error": [clean(x) for x in rot],
                 **({"timing_ms": self.timings_ms[i]} if self.timings_ms else {})}
                for i, (fid, a, b, c, rot) in enumerate(zip(self.frame_ids, self.mpve, self.mpjpe,
                                                             self.pa_mpjpe, self.rotation_error))
            ],
        }


def rotation_errors(pred: Pose, gt: Pose) -> list[float]:
    return [geodesic_angle(a, b) for a, b in zip(pred.rotations, gt.rotations)]


def evaluate(model: SkinnedModel, fits: Sequence[FitState], truth: Sequence[FitState],
             frame_ids: Sequence[int] | None = None, timings_ms: Sequence[float] | None = None) -> EvalReport:
    if len(fits) != len(truth):
        raise SizeMismatch(f"{len(fits)} fits but {len(truth)} ground-truth frames")
    ids = list(frame_ids) if frame_ids is not None else list(range(len(fits)))
    ev = model.eval_indices
    est = set(estimable_joints(model.tree))
    rep = EvalReport(ids, [], [], [], [], list(timings_ms or []))
    for fit, gt in zip(fits, truth):
        rep.mpve.append(metric_mpve(fit_vertices(model, fit), fit_vertices(model, gt)))
        kf, kg = fit_keypoints(model, fit)[ev], fit_keypoints(model, gt)[ev]
        rep.mpjpe.append(metric_mpjpe(kf, kg))
        rep.pa_mpjpe.append(metric_pa_mpjpe(kf, kg))
        errs = rotation_errors(fit.pose, gt.pose)
        rep.rotation_error.append([e if j in est else float("nan") for j, e in enumerate(errs)])
    return rep


# Initialisation comparison -------------------------------------------------

ARMS = ("kama", "mean_pose", "no_init")


def init_kama(model: SkinnedModel, X: KeypointSet) -> FitState:
    return kama(model, X)


def init_mean_pose(model: SkinnedModel, X: KeypointSet) -> FitState:
    """Rest pose with the root oriented by the pelvis keypoint rotation."""
    tree = model.tree
    est = estimate_global_rotations(X, model.canonical_keypoints, tree)
    root_kp = tree.keypoint_of_joint[0]
    rots = [Rotation.identity()] * tree.num_joints
    rots[0] = est.rotations[root_kp]
    pose = Pose(tuple(rots))
    s, t = fit_global_scale_translation(model, pose, X)
    return FitState(pose, np.zeros(model.num_betas), s, t)


def init_no_pose(model: SkinnedModel, X: KeypointSet) -> FitState:
    """Rest pose, root included, placed by a rotation-free similarity.

    Scale is the ratio of RMS spreads about the centroids, which stays
    positive even for upside-down bodies.
    """
    can, x = model.canonical_keypoints, X.positions
    spread = np.sum((can - can.mean(axis=0)) ** 2)
    s = float(np.sqrt(np.sum((x - x.mean(axis=0)) ** 2) / spread)) if spread > 0 else 1.0
    s = max(s, 1e-4)
    t = x.mean(axis=0) - s * can.mean(axis=0)
    return FitState(Pose.identity(model.tree.num_joints), np.zeros(model.num_betas), s, t)


def init_similarity(model: SkinnedModel, X: KeypointSet) -> FitState:
    """Rest pose with the root from a full similarity fit of all keypoints."""
    can = model.canonical_keypoints
    r, s, t = procrustes_align(can, X.positions)
    # the root rotates about its own rest position, not the origin
    r0 = model.tree.joint_positions[0]
    t = t + s * r.apply(r0) - s * r0
    rots = [r] + [Rotation.identity()] * (model.tree.num_joints - 1)
    return FitState(Pose(tuple(rots)), np.zeros(model.num_betas), s, t)


INITS = {"kama": init_kama, "mean_pose": init_mean_pose, "no_init": init_no_pose,
         "similarity": init_similarity}


@dataclass
class ArmResult:
    initial_loss: list[float] = field(default_factory=list)
    final_loss: list[float] = field(default_factory=list)
    pa_mpjpe: list[float] = field(default_factory=list)
    init_pa_mpjpe: list[float] = field(default_factory=list)
    iterations_to_threshold: list[Optional[int]] = field(default_factory=list)
    traces: list[list[float]] = field(default_factory=list)

    def summary(self) -> dict:
        hit = [i for i in self.iterations_to_threshold if i is not None]
        return {
            "mean_initial_loss": float(np.mean(self.initial_loss)),
            "mean_final_loss": float(np.mean(self.final_loss)),
            "mean_pa_mpjpe": float(np.mean(self.pa_mpjpe)),
            "mean_init_pa_mpjpe": float(np.mean(self.init_pa_mpjpe)),
            "reached_threshold": len(hit),
            "mean_iterations_to_threshold": float(np.mean(hit)) if hit else None,
        }


@dataclass
class ComparisonReport:
    arms: dict[str, ArmResult]
    threshold_rel: float
    num_frames: int

    def summary(self) -> dict:
        return {"num_frames": self.num_frames, "threshold_rel": self.threshold_rel,
                "arms": {a: r.summary() for a, r in self.arms.items()}}

    def ordering_holds(self, key: str = "mean_pa_mpjpe") -> bool:
        v = [self.arms[a].summary()[key] for a in ARMS]
        return v[0] <= v[1] <= v[2]


def experiment_init_comparison(model: SkinnedModel, spec: SynthSpec, config: RefineConfig | None = None,
                               threshold_rel: float = 0.05, data: SynthData | None = None,
                               arms: Mapping[str, str] | None = None) -> ComparisonReport:
    """Refine every frame from three initialisations and compare.

    ``arms`` maps the three arm names to entries of ``INITS``; by default
    ``no_init`` starts from the rest pose without any rotation.
    Iterations-to-threshold counts the Adam steps until the loss is within
    ``threshold_rel`` of the best final loss reached by any arm on that frame.
    """
    cfg = config or RefineConfig()
    data = data if data is not None else synth_generate(model, spec)
    ev = model.eval_indices
    chosen = {a: a for a in ARMS}
    chosen.update(arms or {})
    arms = {a: ArmResult() for a in ARMS}
    for fr, gt in zip(data.frames, data.ground_truth):
        kg = fit_keypoints(model, gt)[ev]
        runs: dict[str, RefineResult] = {}
        for a in ARMS:
            init = INITS[chosen[a]](model, fr.keypoints)
            res = refine(init, model, fr.keypoints, fr.camera, cfg)
            runs[a] = res
            arms[a].init_pa_mpjpe.append(metric_pa_mpjpe(fit_keypoints(model, init)[ev], kg))
        best = min(r.best_loss for r in runs.values())
        target = best + threshold_rel * abs(best)
        for a, res in runs.items():
            r = arms[a]
            r.initial_loss.append(res.initial_loss)
            r.final_loss.append(res.best_loss)
            r.pa_mpjpe.append(metric_pa_mpjpe(fit_keypoints(model, res.state)[ev], kg))
            r.traces.append(list(res.trace))
            full = [res.initial_loss] + list(res.trace)
            r.iterations_to_threshold.append(next((i for i, l in enumerate(full) if l <= target), None))
    return ComparisonReport(arms, threshold_rel, len(data.frames))


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, 1000.0 * (time.perf_counter() - t0)
