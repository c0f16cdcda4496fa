import numpy as np
import pytest

from kama.errors import InvalidSpec
from kama.model import Pose, posed_keypoints, skin
from kama.synthetic import DEFAULT_HUMANOID, make_synthetic_model


def test_default_model_invariants(model):
    assert model.tree.num_joints == 24 and model.tree.num_keypoints == 26
    assert 2000 <= model.num_vertices <= 8000
    assert model.num_betas == 10
    np.testing.assert_allclose(model.skin_weights.sum(1), 1, atol=1e-12)
    np.testing.assert_allclose(model.regressor.sum(1), 1, atol=1e-12)
    assert sorted(k for k, _ in model.tree.keypoint_map) == list(range(26))
    names = set(model.tree.keypoint_names)
    for n in ("nose", "l_eye", "r_ear", "l_bigtoe", "r_smalltoe", "l_heel"):
        assert n in names
    assert len(model.eval_keypoints) == 14


def test_unmapped_joints(model):
    t = model.tree
    mapped = {t.joint_names[j] for _, j in t.keypoint_map if j is not None}
    for j in ("spine1", "spine3", "l_collar", "r_collar", "l_hand", "r_hand"):
        assert j not in mapped


def test_mesh_is_closed(model):
    # every edge is shared by exactly two faces
    f = model.faces
    edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert np.all(counts == 2)


def test_joint_centre_keypoints_follow_joints(model):
    rng = np.random.default_rng(0)
    from kama.model import forward_kinematics
    p = Pose.from_axis_angle(rng.normal(scale=0.7, size=(24, 3)))
    fk = forward_kinematics(model.tree, p)
    kp = posed_keypoints(model, p)
    for k, j in model.tree.keypoint_map:
        name = model.tree.keypoint_names[k]
        if j is not None and name not in ("nose", "l_bigtoe", "r_bigtoe"):
            np.testing.assert_allclose(kp[k], fk.positions[j], atol=1e-9)


def test_left_right_mirror(model):
    t = model.tree
    for k, n in enumerate(t.keypoint_names):
        if n.startswith("l_"):
            r = t.keypoint_index("r_" + n[2:])
            np.testing.assert_allclose(model.canonical_keypoints[r],
                                       model.canonical_keypoints[k] * [-1, 1, 1], atol=1e-12)


@pytest.mark.parametrize("target", [4000, 6000, 8000])
def test_vertex_target(target):
    m = make_synthetic_model(num_vertices=target)
    assert abs(m.num_vertices - target) / target < 0.05


def test_vertex_floor():
    # every capsule keeps a minimum ring count, so tiny targets round up
    assert make_synthetic_model(num_vertices=500).num_vertices > 3000


def test_invalid_specs():
    import copy
    spec = copy.deepcopy(DEFAULT_HUMANOID)
    spec["joints"][0]["parent"] = spec["joints"][3]["name"]
    with pytest.raises(InvalidSpec):
        make_synthetic_model(spec)
    spec = copy.deepcopy(DEFAULT_HUMANOID)
    spec["joints"][2]["parent"] = "ghost"
    with pytest.raises(InvalidSpec):
        make_synthetic_model(spec)
    with pytest.raises(InvalidSpec):
        make_synthetic_model({"joints": []})


def test_shape_dirs_smooth_and_nonzero(model):
    b = np.zeros(10)
    for i in range(10):
        b[:] = 0
        b[i] = 1
        d = skin(model, Pose.identity(24), b) - model.vertices
        assert np.abs(d).max() > 1e-3
