"""Analytic articulation of the body model from 3D keypoints.

One pass, no iterations:

1. a global rotation per keypoint from its bone(s),
2. conversion to rotations local to the parent keypoint,
3. removal of the unobservable twist on single-child keypoints,
4. re-indexing onto model joints (joints without a keypoint stay at rest),
5. closed-form global scale and translation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateInput, SizeMismatch
from .geom3d import (Rotation, axis_angle_between, fit_scale_translation,
                     swing_twist_decompose, weighted_kabsch)
from .model import (KinematicTree, Pose, SkinnedModel, check_beta, posed_keypoints, skin)

ONE_CHILD = "one_child"
MULTI_CHILD = "multi_child"
ZEROED = "zeroed"
LEAF = "leaf"


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """Observed keypoints in camera space (metres) with detection confidences."""

    positions: np.ndarray
    confidence: np.ndarray
    projected_2d: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        conf = np.asarray(self.confidence, dtype=float).reshape(-1)
        if pos.ndim != 2 or pos.shape[1] != 3 or conf.shape != (len(pos),):
            raise SizeMismatch(f"positions {pos.shape} and confidence {conf.shape} disagree")
        if not np.all(np.isfinite(pos)):
            raise ValueError("keypoint positions must be finite")
        if np.any(~((conf >= 0) & (conf <= 1))):
            raise ValueError("confidences must lie in [0, 1]")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "confidence", conf)
        if self.projected_2d is not None:
            uv = np.asarray(self.projected_2d, dtype=float)
            if uv.shape != (len(pos), 2) or not np.all(np.isfinite(uv)):
                raise SizeMismatch(f"projected_2d must be finite ({len(pos)}, 2), got {uv.shape}")
            object.__setattr__(self, "projected_2d", uv)

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def certain(cls, positions) -> "KeypointSet":
        pos = np.asarray(positions, dtype=float)
        return cls(pos, np.ones(len(pos)))


@dataclass(frozen=True, eq=False)
class FitState:
    """Pose, shape, global scale and translation of an articulated model.

    The mesh in camera space is ``scale * skin(model, pose, beta) + translation``.
    """

    pose: Pose
    beta: np.ndarray
    scale: float
    translation: np.ndarray
    per_joint_source: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "beta", check_beta(self.beta))
        t = np.asarray(self.translation, dtype=float).reshape(-1)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise SizeMismatch("translation must be a finite 3-vector")
        object.__setattr__(self, "translation", t)
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))
        if not self.per_joint_source:
            object.__setattr__(self, "per_joint_source", (ZEROED,) * len(self.pose))
        elif len(self.per_joint_source) != len(self.pose):
            raise SizeMismatch("per_joint_source must have one tag per joint")

    @classmethod
    def rest(cls, model: SkinnedModel) -> "FitState":
        return cls(Pose.identity(model.tree.num_joints), np.zeros(model.num_betas), 1.0, np.zeros(3))


def fit_vertices(model: SkinnedModel, state: FitState) -> np.ndarray:
    return state.scale * skin(model, state.pose, state.beta) + state.translation


def fit_keypoints(model: SkinnedModel, state: FitState) -> np.ndarray:
    return state.scale * posed_keypoints(model, state.pose, state.beta) + state.translation


@dataclass(frozen=True)
class ArticulationConfig:
    """Options for the analytic pass.

    ``neighborhood`` selects the points fitted for multi-child keypoints:
    ``"children"`` uses the keypoint and its children, ``"adjacent"`` adds the
    parent.  ``pair_selection`` restricts keypoints with more than two children
    to their two most confident children.
    """

    neighborhood: str = "children"
    pair_selection: bool = False
    confidence_floor: float = 1e-4
    remove_twist: bool = True

    def __post_init__(self):
        if self.neighborhood not in ("children", "adjacent"):
            raise ValueError(f"unknown neighborhood {self.neighborhood!r}")


@dataclass(frozen=True)
class GlobalEstimate:
    rotations: tuple[Rotation, ...]
    tags: tuple[str, ...]
    # child whose bone defined a one-child rotation, -1 otherwise
    bone_child: tuple[int, ...]


def _one_child(canonical, observed, k, c) -> Rotation:
    return axis_angle_between(canonical[c] - canonical[k], observed[c] - observed[k])


def estimate_global_rotations(X: KeypointSet, canonical, tree: KinematicTree,
                              config: ArticulationConfig | None = None) -> GlobalEstimate:
    cfg = config or ArticulationConfig()
    canonical = np.asarray(canonical, dtype=float)
    if len(X) != tree.num_keypoints or canonical.shape != (tree.num_keypoints, 3):
        raise SizeMismatch(f"expected {tree.num_keypoints} keypoints, got {len(X)}")
    obs, psi = X.positions, X.confidence
    rots, tags, bone = [], [], []
    for k in range(tree.num_keypoints):
        kids = list(tree.keypoint_children[k])
        if not kids:
            rots.append(Rotation.identity())
            tags.append(LEAF)
            bone.append(-1)
            continue
        if len(kids) == 1:
            rots.append(_one_child(canonical, obs, k, kids[0]))
            tags.append(ONE_CHILD)
            bone.append(kids[0])
            continue
        if cfg.pair_selection and len(kids) > 2:
            kids = sorted(kids, key=lambda c: -psi[c])[:2]
        wk = psi[kids].copy()
        if wk.sum() < cfg.confidence_floor:
            wk = wk + cfg.confidence_floor
        members = [k] + kids
        weights = [psi[k]] + list(wk)
        p = tree.keypoint_parents[k]
        if cfg.neighborhood == "adjacent" and p >= 0:
            members.append(p)
            weights.append(psi[p])
        try:
            if np.count_nonzero(wk > 0) < 2:
                raise DegenerateInput("fewer than two weighted children")
            rot = weighted_kabsch(canonical[members] - canonical[k], obs[members] - obs[k], weights)
            rots.append(rot)
            tags.append(MULTI_CHILD)
            bone.append(-1)
        except DegenerateInput:
            best = max(tree.keypoint_children[k], key=lambda c: psi[c])
            rots.append(_one_child(canonical, obs, k, best))
            tags.append(ONE_CHILD)
            bone.append(best)
    return GlobalEstimate(tuple(rots), tuple(tags), tuple(bone))


def globals_to_locals(globals_: Sequence[Rotation], tree: KinematicTree,
                      tags: Sequence[str] | None = None) -> list[Rotation]:
    """Express each rotation relative to its parent keypoint's global rotation.

    Leaf keypoints carry no rotation and are not part of the chain; their local
    rotation is the identity.
    """
    if tags is None:
        tags = [LEAF if not kids else "" for kids in tree.keypoint_children]
    out = []
    for k, g in enumerate(globals_):
        p = tree.keypoint_parents[k]
        if tags[k] == LEAF:
            out.append(Rotation.identity())
        elif p < 0:
            out.append(g)
        else:
            out.append(globals_[p].inverse() * g)
    return out


def remove_twist(locals_: Sequence[Rotation], tree: KinematicTree, canonical,
                 bone_child: Sequence[int] | None = None) -> list[Rotation]:
    """Keep only the swing of every single-child rotation.

    The discarded twist is handed down to the non-leaf children so that their
    global rotations, and therefore every keypoint position, stay unchanged.
    """
    canonical = np.asarray(canonical, dtype=float)
    kids = tree.keypoint_children
    if bone_child is None:
        bone_child = [c[0] if len(c) == 1 else -1 for c in kids]
    out = list(locals_)
    for k in range(tree.num_keypoints):
        c = bone_child[k]
        if c < 0:
            continue
        axis = canonical[c] - canonical[k]
        swing, twist = swing_twist_decompose(out[k], axis / np.linalg.norm(axis))
        out[k] = swing
        for child in kids[k]:
            if kids[child]:
                out[child] = twist * out[child]
    return out


def map_to_model_pose(keypoint_rotations: Sequence[Rotation], tree: KinematicTree,
                      tags: Sequence[str] | None = None) -> tuple[Pose, tuple[str, ...]]:
    """Re-index keypoint rotations onto model joints; unmapped joints stay at rest."""
    rots = [Rotation.identity()] * tree.num_joints
    sources = [ZEROED] * tree.num_joints
    for k, j in tree.keypoint_map:
        if j is None:
            continue
        rots[j] = keypoint_rotations[k]
        if tags is not None and tags[k] in (ONE_CHILD, MULTI_CHILD):
            sources[j] = tags[k]
    return Pose(tuple(rots)), tuple(sources)


def fit_global_scale_translation(model: SkinnedModel, pose: Pose, X: KeypointSet) -> tuple[float, np.ndarray]:
    """Scale and translation placing the rest-shape articulated mesh on ``X``."""
    kps = posed_keypoints(model, pose, None)
    return fit_scale_translation(kps, X.positions)


@dataclass
class KamaTrace:
    """Intermediate results of one analytic pass, kept for inspection."""

    estimate: GlobalEstimate
    locals_raw: list[Rotation] = field(default_factory=list)
    locals_final: list[Rotation] = field(default_factory=list)


def kama(model: SkinnedModel, X: KeypointSet, config: ArticulationConfig | None = None,
         trace: KamaTrace | None = None) -> FitState:
    cfg = config or ArticulationConfig()
    tree = model.tree
    canonical = model.canonical_keypoints
    est = estimate_global_rotations(X, canonical, tree, cfg)
    locals_ = globals_to_locals(est.rotations, tree, est.tags)
    final = remove_twist(locals_, tree, canonical, est.bone_child) if cfg.remove_twist else locals_
    pose, sources = map_to_model_pose(final, tree, est.tags)
    s, t = fit_global_scale_translation(model, pose, X)
    if trace is not None:
        trace.estimate = est
        trace.locals_raw = locals_
        trace.locals_final = final
    return FitState(pose, np.zeros(model.num_betas), s, t, sources)
