"""Kinematic tree, linear blend skinning and the vertex-to-keypoint regressor."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidSpec, IoError, ModelError, ParseError, SizeMismatch
from .geom3d import Rotation, axis_angle_to_matrix

NUM_BETAS = 10
ROW_SUM_TOL = 1e-6
KEYPOINT_CONSISTENCY_TOL = 1e-9


def _children(parents: np.ndarray) -> tuple[tuple[int, ...], ...]:
    kids: list[list[int]] = [[] for _ in range(len(parents))]
    for i, p in enumerate(parents):
        if p >= 0:
            kids[p].append(i)
    return tuple(tuple(k) for k in kids)


def _check_parent_array(parents: np.ndarray, what: str) -> None:
    if len(parents) == 0:
        raise InvalidSpec(f"{what}: empty hierarchy")
    roots = [i for i, p in enumerate(parents) if p < 0]
    if len(roots) != 1 or roots[0] != 0:
        raise InvalidSpec(f"{what}: expected exactly one root at index 0, got roots {roots}")
    for i, p in enumerate(parents):
        if i > 0 and not 0 <= p < i:
            raise InvalidSpec(
                f"{what}: entry {i} has parent {p}; parents must precede children (cycle or bad order)")


@dataclass(frozen=True, eq=False)
class KinematicTree:
    """Joint hierarchy of the body model plus the keypoint skeleton mapped onto it.

    ``parents`` and ``keypoint_parents`` use -1 for the root and are
    topologically ordered.  ``keypoint_map`` lists ``(keypoint, joint)`` pairs;
    keypoints that drive no model joint carry ``None``.
    """

    joint_names: tuple[str, ...]
    parents: np.ndarray
    joint_positions: np.ndarray
    keypoint_names: tuple[str, ...]
    keypoint_parents: np.ndarray
    keypoint_map: tuple[tuple[int, Optional[int]], ...]

    def __post_init__(self):
        object.__setattr__(self, "parents", np.asarray(self.parents, dtype=int))
        object.__setattr__(self, "keypoint_parents", np.asarray(self.keypoint_parents, dtype=int))
        object.__setattr__(self, "joint_positions", np.asarray(self.joint_positions, dtype=float))
        J, K = len(self.joint_names), len(self.keypoint_names)
        if self.parents.shape != (J,) or self.joint_positions.shape != (J, 3):
            raise InvalidSpec("joint arrays disagree with the number of joint names")
        if self.keypoint_parents.shape != (K,):
            raise InvalidSpec("keypoint parents disagree with the number of keypoint names")
        if len(set(self.joint_names)) != J or len(set(self.keypoint_names)) != K:
            raise InvalidSpec("duplicate joint or keypoint names")
        _check_parent_array(self.parents, "joints")
        _check_parent_array(self.keypoint_parents, "keypoints")
        if not np.all(np.isfinite(self.joint_positions)):
            raise InvalidSpec("joint positions must be finite")
        seen_k = sorted(k for k, _ in self.keypoint_map)
        if seen_k != list(range(K)):
            raise InvalidSpec("keypoint_map must list every keypoint exactly once")
        joints = [j for _, j in self.keypoint_map if j is not None]
        if len(set(joints)) != len(joints):
            raise InvalidSpec("keypoint_map maps two keypoints onto the same joint")
        if any(not 0 <= j < J for j in joints):
            raise InvalidSpec("keypoint_map references an unknown joint")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoint_names)

    @cached_property
    def children(self) -> tuple[tuple[int, ...], ...]:
        return _children(self.parents)

    @cached_property
    def keypoint_children(self) -> tuple[tuple[int, ...], ...]:
        return _children(self.keypoint_parents)

    @cached_property
    def joint_of_keypoint(self) -> np.ndarray:
        out = np.full(self.num_keypoints, -1, dtype=int)
        for k, j in self.keypoint_map:
            if j is not None:
                out[k] = j
        return out

    @cached_property
    def keypoint_of_joint(self) -> np.ndarray:
        out = np.full(self.num_joints, -1, dtype=int)
        for k, j in self.keypoint_map:
            if j is not None:
                out[j] = k
        return out

    def joint_index(self, name: str) -> int:
        return self.joint_names.index(name)

    def keypoint_index(self, name: str) -> int:
        return self.keypoint_names.index(name)


@dataclass(frozen=True)
class Pose:
    """Local joint rotations ordered by model joint index."""

    rotations: tuple[Rotation, ...]

    @classmethod
    def identity(cls, num_joints: int) -> "Pose":
        return cls(tuple(Rotation.identity() for _ in range(num_joints)))

    @classmethod
    def from_axis_angle(cls, rotvecs) -> "Pose":
        rv = np.asarray(rotvecs, dtype=float).reshape(-1, 3)
        return cls(tuple(Rotation.from_axis_angle(v) for v in rv))

    def __len__(self) -> int:
        return len(self.rotations)

    def axis_angle(self) -> np.ndarray:
        return np.array([r.as_axis_angle() for r in self.rotations]).reshape(-1, 3)

    def matrices(self) -> np.ndarray:
        return np.array([r.as_matrix() for r in self.rotations]).reshape(-1, 3, 3)


@dataclass(frozen=True)
class FKResult:
    """Global joint transforms: ``x -> rotations[j] @ (x - rest[j]) + positions[j]``."""

    rotations: np.ndarray
    positions: np.ndarray

    def global_rotation(self, j: int) -> Rotation:
        return Rotation.from_matrix(self.rotations[j])


def forward_kinematics_matrices(tree: KinematicTree, local: np.ndarray) -> FKResult:
    """Forward kinematics from local rotation matrices ``(J, 3, 3)``."""
    J = tree.num_joints
    if local.shape != (J, 3, 3):
        raise SizeMismatch(f"expected {J} local rotations, got {local.shape[0]}")
    rest = tree.joint_positions
    Rg = np.empty((J, 3, 3))
    P = np.empty((J, 3))
    Rg[0] = local[0]
    P[0] = rest[0]
    for j in range(1, J):
        p = tree.parents[j]
        Rg[j] = Rg[p] @ local[j]
        P[j] = P[p] + Rg[p] @ (rest[j] - rest[p])
    return FKResult(Rg, P)


def forward_kinematics(tree: KinematicTree, pose: Pose) -> FKResult:
    if len(pose) != tree.num_joints:
        raise SizeMismatch(f"pose has {len(pose)} joints, tree has {tree.num_joints}")
    return forward_kinematics_matrices(tree, pose.matrices())


@dataclass(frozen=True, eq=False)
class SkinnedModel:
    """Rest mesh, skinning weights, shape directions and keypoint regressor.

    ``shape_dirs`` has shape ``(V, 3, B)`` and ``regressor`` shape ``(K, V)``.
    ``eval_keypoints`` names the subset used for joint-error metrics.
    """

    tree: KinematicTree
    vertices: np.ndarray
    faces: np.ndarray
    skin_weights: np.ndarray
    shape_dirs: np.ndarray
    regressor: np.ndarray
    eval_keypoints: tuple[str, ...] = field(default=())

    def __post_init__(self):
        for name, dtype in (("vertices", float), ("faces", int), ("skin_weights", float),
                            ("shape_dirs", float), ("regressor", float)):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=dtype))
        V, J, K = len(self.vertices), self.tree.num_joints, self.tree.num_keypoints
        if self.vertices.shape != (V, 3) or V == 0:
            raise ModelError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ModelError(f"faces must be (F, 3), got {self.faces.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= V):
            raise ModelError("faces reference vertices outside [0, V)")
        if self.skin_weights.shape != (V, J):
            raise ModelError(f"skin_weights must be ({V}, {J}), got {self.skin_weights.shape}")
        if np.any(self.skin_weights < 0) or np.max(np.abs(self.skin_weights.sum(1) - 1)) > ROW_SUM_TOL:
            raise ModelError("skin weight rows must be non-negative and sum to 1")
        if self.shape_dirs.shape != (V, 3, NUM_BETAS):
            raise ModelError(f"shape_dirs must be ({V}, 3, {NUM_BETAS}), got {self.shape_dirs.shape}")
        if self.regressor.shape != (K, V):
            raise ModelError(f"regressor must be ({K}, {V}), got {self.regressor.shape}")
        if np.any(self.regressor < 0) or np.max(np.abs(self.regressor.sum(1) - 1)) > ROW_SUM_TOL:
            raise ModelError("regressor rows must be non-negative and sum to 1")
        unknown = set(self.eval_keypoints) - set(self.tree.keypoint_names)
        if unknown:
            raise ModelError(f"eval_keypoints name unknown keypoints: {sorted(unknown)}")
        for arr in (self.vertices, self.skin_weights, self.shape_dirs, self.regressor):
            arr.setflags(write=False)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_betas(self) -> int:
        return self.shape_dirs.shape[2]

    @cached_property
    def canonical_keypoints(self) -> np.ndarray:
        """Rest-pose keypoints ``W @ vertices``."""
        return self.regressor @ self.vertices

    @cached_property
    def eval_indices(self) -> np.ndarray:
        names = self.eval_keypoints or self.tree.keypoint_names
        return np.array([self.tree.keypoint_index(n) for n in names], dtype=int)

    @cached_property
    def _reduced(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        # per (keypoint, joint): regressor-weighted skinning mass, rest moment, shape moment
        W, S = self.regressor, self.skin_weights
        mass = W @ S
        moment = np.einsum("kv,vj,vc->kjc", W, S, self.vertices)
        shape_moment = np.einsum("kv,vj,vcb->kjcb", W, S, self.shape_dirs)
        return mass, moment, shape_moment

    def keypoint_offsets(self, beta) -> np.ndarray:
        """Offsets ``(K, J, 3)`` such that ``W skin = sum_j Rg_j q_kj + mass_kj P_j``."""
        mass, moment, shape_moment = self._reduced
        beta = check_beta(beta, self.num_betas)
        return moment + shape_moment @ beta - mass[:, :, None] * self.tree.joint_positions[None]

    def posed_keypoints_fk(self, fk: FKResult, beta) -> np.ndarray:
        """``W @ skin(...)`` evaluated without skinning every vertex."""
        mass = self._reduced[0]
        q = self.keypoint_offsets(beta)
        return np.einsum("jab,kjb->ka", fk.rotations, q) + mass @ fk.positions


def check_beta(beta, num_betas: int = NUM_BETAS) -> np.ndarray:
    b = np.zeros(num_betas) if beta is None else np.asarray(beta, dtype=float).reshape(-1)
    if b.shape != (num_betas,):
        raise SizeMismatch(f"shape vector must have {num_betas} entries, got {b.size}")
    if not np.all(np.isfinite(b)):
        raise SizeMismatch("shape vector must be finite")
    return b


def skin(model: SkinnedModel, pose: Pose, beta=None) -> np.ndarray:
    """Posed vertices: shape blend first, then linear blend skinning."""
    fk = forward_kinematics(model.tree, pose)
    return skin_fk(model, fk, beta)


def skin_fk(model: SkinnedModel, fk: FKResult, beta=None) -> np.ndarray:
    b = check_beta(beta, model.num_betas)
    shaped = model.vertices + model.shape_dirs @ b
    rest = model.tree.joint_positions
    offsets = fk.positions - np.einsum("jab,jb->ja", fk.rotations, rest)
    blended = np.einsum("vj,jab->vab", model.skin_weights, fk.rotations)
    return np.einsum("vab,vb->va", blended, shaped) + model.skin_weights @ offsets


def regress_keypoints(model: SkinnedModel, vertices) -> np.ndarray:
    v = np.asarray(vertices, dtype=float)
    if v.shape != (model.num_vertices, 3):
        raise SizeMismatch(f"expected ({model.num_vertices}, 3) vertices, got {v.shape}")
    return model.regressor @ v


def posed_keypoints(model: SkinnedModel, pose: Pose, beta=None) -> np.ndarray:
    """Keypoints of the posed mesh, equal to ``regress_keypoints(skin(...))``."""
    return model.posed_keypoints_fk(forward_kinematics(model.tree, pose), beta)


def posed_keypoints_axis_angle(model: SkinnedModel, rotvecs: np.ndarray, beta=None) -> np.ndarray:
    fk = forward_kinematics_matrices(model.tree, axis_angle_to_matrix(rotvecs))
    return model.posed_keypoints_fk(fk, beta)


# Model file I/O -------------------------------------------------------------

def _triplets(dense: np.ndarray) -> list[list]:
    rows, cols = np.nonzero(dense)
    return [[int(r), int(c), float(dense[r, c])] for r, c in zip(rows, cols)]


def _from_triplets(entries, shape, what: str) -> np.ndarray:
    out = np.zeros(shape)
    try:
        for r, c, v in entries:
            if not (0 <= int(r) < shape[0] and 0 <= int(c) < shape[1]):
                raise ParseError(f"{what}: index ({r}, {c}) outside {shape}")
            out[int(r), int(c)] = float(v)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"{what}: entries must be [row, col, value] triplets ({exc})") from exc
    return out


def model_to_dict(model: SkinnedModel) -> dict:
    tree = model.tree
    V = model.num_vertices
    return {
        "format": "kama-model/1",
        "joints": [
            {"name": n, "parent": None if p < 0 else tree.joint_names[p],
             "position": [float(c) for c in pos]}
            for n, p, pos in zip(tree.joint_names, tree.parents, tree.joint_positions)
        ],
        "keypoints": [
            {"name": n, "parent": None if p < 0 else tree.keypoint_names[p],
             "position": [float(c) for c in pos]}
            for n, p, pos in zip(tree.keypoint_names, tree.keypoint_parents, model.canonical_keypoints)
        ],
        "keypoint_map": [
            {"keypoint": tree.keypoint_names[k], "joint": None if j is None else tree.joint_names[j]}
            for k, j in tree.keypoint_map
        ],
        "eval_keypoints": list(model.eval_keypoints),
        "vertices": model.vertices.tolist(),
        "faces": model.faces.tolist(),
        "skin_weights": _triplets(model.skin_weights),
        "shape_dirs": _triplets(model.shape_dirs.reshape(V * 3, -1)),
        "W": _triplets(model.regressor),
    }


def _names_and_parents(entries, what: str):
    names = [e["name"] for e in entries]
    index = {n: i for i, n in enumerate(names)}
    parents = []
    for e in entries:
        p = e.get("parent")
        if p is None:
            parents.append(-1)
        elif p in index:
            parents.append(index[p])
        else:
            raise ParseError(f"{what} '{e['name']}' has unknown parent '{p}'")
    return names, parents


def model_from_dict(doc: dict) -> SkinnedModel:
    try:
        joint_names, parents = _names_and_parents(doc["joints"], "joint")
        positions = np.array([j["position"] for j in doc["joints"]], dtype=float)
        kp_names, kp_parents = _names_and_parents(doc["keypoints"], "keypoint")
        kmap = []
        for entry in doc["keypoint_map"]:
            k = kp_names.index(entry["keypoint"]) if entry["keypoint"] in kp_names else None
            if k is None:
                raise ParseError(f"keypoint_map names unknown keypoint '{entry['keypoint']}'")
            j = entry.get("joint")
            if j is not None and j not in joint_names:
                raise ParseError(f"keypoint_map names unknown joint '{j}'")
            kmap.append((k, None if j is None else joint_names.index(j)))
        vertices = np.array(doc["vertices"], dtype=float)
        faces = np.array(doc["faces"], dtype=int).reshape(-1, 3)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ParseError(f"vertices must be a list of [x, y, z], got shape {vertices.shape}")
        V, J, K = len(vertices), len(joint_names), len(kp_names)
        skin_w = _from_triplets(doc["skin_weights"], (V, J), "skin_weights")
        sdirs = _from_triplets(doc["shape_dirs"], (V * 3, NUM_BETAS), "shape_dirs").reshape(V, 3, NUM_BETAS)
        W = _from_triplets(doc["W"], (K, V), "W")
        stored = np.array([kp["position"] for kp in doc["keypoints"]], dtype=float)
        eval_kps = tuple(doc.get("eval_keypoints", ()))
    except KeyError as exc:
        raise ParseError(f"model file is missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"malformed model file: {exc}") from exc
    try:
        tree = KinematicTree(tuple(joint_names), np.array(parents), positions, tuple(kp_names),
                             np.array(kp_parents), tuple(kmap))
    except InvalidSpec as exc:
        raise ModelError(str(exc)) from exc
    model = SkinnedModel(tree, vertices, faces, skin_w, sdirs, W, eval_kps)
    if stored.shape != (K, 3):
        raise ModelError(f"stored keypoint positions must be ({K}, 3)")
    err = np.max(np.abs(model.canonical_keypoints - stored))
    if err > KEYPOINT_CONSISTENCY_TOL:
        raise ModelError(f"W @ vertices disagrees with stored keypoints by {err:.3g} m")
    return model


def save_model(model: SkinnedModel, path) -> None:
    try:
        Path(path).write_text(json.dumps(model_to_dict(model)))
    except OSError as exc:
        raise IoError(f"cannot write model to {path}: {exc}") from exc


def load_model(path) -> SkinnedModel:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read model {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be an object")
    return model_from_dict(doc)

