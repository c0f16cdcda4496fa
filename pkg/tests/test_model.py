import json

import numpy as np
import pytest

from conftest import build_chain_model
from kama.errors import InvalidSpec, IoError, ModelError, ParseError, SizeMismatch
from kama.geom3d import Rotation
from kama.model import (KinematicTree, Pose, SkinnedModel, forward_kinematics, load_model, model_from_dict,
                        model_to_dict, posed_keypoints, regress_keypoints, save_model, skin)


def rot_z(a):
    return Rotation.from_axis_angle([0, 0, a])


def pose_with(n, **rots):
    r = [Rotation.identity()] * n
    for k, v in rots.items():
        r[int(k[1:])] = v
    return Pose(tuple(r))


# tree ---------------------------------------------------------------------

def test_tree_rejects_bad_structures():
    base = dict(joint_names=("a", "b"), parents=np.array([-1, 0]), joint_positions=np.zeros((2, 3)),
                keypoint_names=("ka", "kb"), keypoint_parents=np.array([-1, 0]), keypoint_map=((0, 0), (1, 1)))
    KinematicTree(**base)
    for change in (dict(parents=np.array([-1, -1])),           # two roots
                   dict(parents=np.array([1, 0])),             # cycle / order
                   dict(keypoint_map=((0, 0),)),               # keypoint missing
                   dict(keypoint_map=((0, 0), (1, 0))),        # not injective
                   dict(keypoint_map=((0, 0), (1, 5))),        # unknown joint
                   dict(joint_names=("a", "a"))):
        with pytest.raises(InvalidSpec):
            KinematicTree(**{**base, **change})


def test_tree_derived_adjacency(model):
    t = model.tree
    assert t.num_joints == 24 and t.num_keypoints == 26
    pel = t.keypoint_index("pelvis")
    assert {t.keypoint_names[c] for c in t.keypoint_children[pel]} == {"l_hip", "r_hip", "spine"}
    assert t.joint_of_keypoint[t.keypoint_index("l_eye")] == -1


# forward kinematics -----------------------------------------------------------

def test_fk_identity_and_size(chain_model):
    t = chain_model.tree
    fk = forward_kinematics(t, Pose.identity(3))
    np.testing.assert_array_equal(fk.positions, t.joint_positions)
    with pytest.raises(SizeMismatch):
        forward_kinematics(t, Pose.identity(2))


def test_fk_root_rotation_rigid(model):
    rng = np.random.default_rng(0)
    r0 = Rotation.from_axis_angle(rng.normal(size=3))
    t = model.tree
    fk = forward_kinematics(t, pose_with(t.num_joints, j0=r0))
    root = t.joint_positions[0]
    np.testing.assert_allclose(fk.positions, r0.apply(t.joint_positions - root) + root, atol=1e-12)


def test_fk_single_elbow_arc(chain_model):
    # 90 degrees at the middle joint swings the end joint on a unit circle about it
    for a in (np.pi / 2, 0.3, -1.1):
        fk = forward_kinematics(chain_model.tree, pose_with(3, j1=rot_z(a)))
        np.testing.assert_allclose(fk.positions[2], [1 + np.cos(a), np.sin(a), 0], atol=1e-12)


def test_fk_deterministic(model):
    rng = np.random.default_rng(1)
    p = Pose.from_axis_angle(rng.normal(scale=0.5, size=(24, 3)))
    a, b = forward_kinematics(model.tree, p), forward_kinematics(model.tree, p)
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.rotations, b.rotations)


# skinning -------------------------------------------------------------------

def test_skin_identity_and_shape(chain_model, model):
    np.testing.assert_allclose(skin(model, Pose.identity(24), np.zeros(10)), model.vertices, atol=1e-15)
    e1 = np.eye(10)[0]
    np.testing.assert_allclose(skin(model, Pose.identity(24), e1), model.vertices + model.shape_dirs[:, :, 0],
                               atol=1e-12)
    out = skin(chain_model, pose_with(3, j1=rot_z(np.pi / 2)), None)
    np.testing.assert_allclose(out[3], [1, 2, 0], atol=1e-12)
    with pytest.raises(SizeMismatch):
        skin(model, Pose.identity(24), np.zeros(3))


def test_skin_shape_then_pose(chain_model):
    beta = np.zeros(10)
    beta[0] = 1.0
    out = skin(chain_model, pose_with(3, j1=rot_z(np.pi / 2)), beta)
    # tip was pushed 0.1 along x in rest, then swung to +y
    np.testing.assert_allclose(out[3], [1, 2.1, 0], atol=1e-12)


def test_skin_rigid_root_rotation(chain_model):
    r0 = Rotation.from_axis_angle([0.3, -0.4, 1.2])
    out = skin(chain_model, pose_with(3, j0=r0), None)
    np.testing.assert_allclose(out, r0.apply(chain_model.vertices), atol=1e-12)


def test_rigid_subtree_property(model):
    t = model.tree
    rng = np.random.default_rng(2)
    lk = t.joint_index("l_knee")
    sub = {lk, t.joint_index("l_ankle"), t.joint_index("l_foot")}
    rv = rng.normal(scale=0.4, size=(24, 3))
    rv[list(sub)] = 0
    p = Pose.from_axis_angle(rv)
    fk = forward_kinematics(t, p)
    # subtree joints are at rest, so the whole subtree moves with the knee
    rigid = np.isclose(model.skin_weights[:, list(sub)].sum(1), 1.0)
    assert rigid.sum() > 100
    out = skin(model, p)
    R = fk.rotations[lk]
    expect = (model.vertices[rigid] - t.joint_positions[lk]) @ R.T + fk.positions[lk]
    np.testing.assert_allclose(out[rigid], expect, atol=1e-12)


def test_shape_linearity(model):
    rng = np.random.default_rng(3)
    b1, b2 = rng.normal(size=10), rng.normal(size=10)
    p = Pose.identity(24)
    base = skin(model, p, None)
    lhs = skin(model, p, b1 + b2) - base
    rhs = (skin(model, p, b1) - base) + (skin(model, p, b2) - base)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


# regression -------------------------------------------------------------------

def test_regress_examples(chain_model, model):
    v = chain_model.vertices
    np.testing.assert_array_equal(regress_keypoints(chain_model, v)[1], v[1])
    W = chain_model.regressor.copy()
    W[3] = 0
    W[3, [0, 2]] = 0.5
    m2 = SkinnedModel(chain_model.tree, v, chain_model.faces, chain_model.skin_weights,
                      chain_model.shape_dirs, W)
    np.testing.assert_allclose(regress_keypoints(m2, v)[3], (v[0] + v[2]) / 2)
    np.testing.assert_allclose(regress_keypoints(model, model.vertices), model.canonical_keypoints, atol=1e-9)
    with pytest.raises(SizeMismatch):
        regress_keypoints(model, model.vertices[:10])


def test_reduced_keypoints_equal_full_skinning(model):
    rng = np.random.default_rng(4)
    for _ in range(5):
        p = Pose.from_axis_angle(rng.normal(scale=0.6, size=(24, 3)))
        b = rng.normal(size=10)
        np.testing.assert_allclose(posed_keypoints(model, p, b), regress_keypoints(model, skin(model, p, b)),
                                   atol=1e-12)


# invariants -------------------------------------------------------------------

def test_model_invariants_enforced(chain_model):
    m = chain_model
    args = dict(tree=m.tree, vertices=m.vertices, faces=m.faces, skin_weights=m.skin_weights,
                shape_dirs=m.shape_dirs, regressor=m.regressor)
    bad_w = m.skin_weights.copy()
    bad_w[0, 0] = 0.9
    bad_W = m.regressor.copy()
    bad_W[0, 0] = 2.0
    for change in (dict(skin_weights=bad_w), dict(regressor=bad_W), dict(faces=np.array([[0, 1, 99]])),
                   dict(shape_dirs=np.zeros((5, 3, 4)))):
        with pytest.raises(ModelError):
            SkinnedModel(**{**args, **change})
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 1.0


# file format ------------------------------------------------------------------

def test_model_file_round_trip(tmp_path, model):
    path = tmp_path / "m.json"
    save_model(model, path)
    back = load_model(path)
    np.testing.assert_array_equal(back.vertices, model.vertices)
    np.testing.assert_array_equal(back.faces, model.faces)
    np.testing.assert_array_equal(back.skin_weights, model.skin_weights)
    np.testing.assert_array_equal(back.shape_dirs, model.shape_dirs)
    np.testing.assert_array_equal(back.regressor, model.regressor)
    assert back.tree.keypoint_map == model.tree.keypoint_map
    assert back.eval_keypoints == model.eval_keypoints


def _mutate(doc, fn):
    doc = json.loads(json.dumps(doc))
    fn(doc)
    return doc


MALFORMED_MODELS = {
    "missing_joints": (lambda d: d.pop("joints"), ParseError),
    "unknown_parent": (lambda d: d["joints"][1].update(parent="nope"), ParseError),
    "bad_triplet": (lambda d: d["W"].append([0, 1]), ParseError),
    "triplet_out_of_range": (lambda d: d["W"].append([0, 10**6, 0.1]), ParseError),
    "row_sum": (lambda d: d["skin_weights"].append([0, 1, 0.5]), ModelError),
    "stored_keypoint_drift": (lambda d: d["keypoints"][0]["position"].__setitem__(0, 99.0), ModelError),
    "cycle": (lambda d: d["joints"][0].update(parent=d["joints"][1]["name"]), ModelError),
    "unknown_map_joint": (lambda d: d["keypoint_map"][0].update(joint="zzz"), ParseError),
    "vertices_not_xyz": (lambda d: d.update(vertices=[[0, 1]]), ParseError),
}


@pytest.mark.parametrize("case", sorted(MALFORMED_MODELS))
def test_model_loader_rejects_malformed(case):
    doc = model_to_dict(build_chain_model())
    fn, exc = MALFORMED_MODELS[case]
    with pytest.raises(exc):
        model_from_dict(_mutate(doc, fn))


def test_model_loader_file_errors(tmp_path):
    with pytest.raises(IoError):
        load_model(tmp_path / "missing.json")
    p = tmp_path / "bad.json"
    p.write_text("{ not json")
    with pytest.raises(ParseError, match="line 1"):
        load_model(p)
