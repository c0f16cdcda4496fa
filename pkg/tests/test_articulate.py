import time

import numpy as np
import pytest

from kama.articulate import (LEAF, MULTI_CHILD, ONE_CHILD, ZEROED, ArticulationConfig, FitState, KamaTrace,
                             KeypointSet, estimate_global_rotations, fit_global_scale_translation,
                             fit_keypoints, globals_to_locals, kama, map_to_model_pose, remove_twist)
from kama.errors import SizeMismatch
from kama.geom3d import Rotation, geodesic_angle
from kama.harness import SynthSpec, estimable_joints, sample_pose
from kama.model import Pose, forward_kinematics, posed_keypoints


def twist_free_pose(model, rng, **kw):
    return sample_pose(model, SynthSpec(**kw), rng)


def fk_keypoint_globals(model, pose):
    fk = forward_kinematics(model.tree, pose)
    return [None if j is None else Rotation.from_matrix(fk.rotations[j]) for _, j in model.tree.keypoint_map]


def test_keypointset_validation():
    with pytest.raises(ValueError):
        KeypointSet(np.zeros((3, 3)), [0.5, 1.2, 0])
    with pytest.raises(ValueError):
        KeypointSet(np.full((2, 3), np.nan), [1, 1])
    with pytest.raises(SizeMismatch):
        KeypointSet(np.zeros((3, 3)), [1, 1])
    with pytest.raises(SizeMismatch):
        KeypointSet(np.zeros((2, 3)), [1, 1], np.zeros((3, 2)))


def test_fitstate_validation():
    with pytest.raises(ValueError):
        FitState(Pose.identity(24), np.zeros(10), 0.0, np.zeros(3))
    with pytest.raises(SizeMismatch):
        FitState(Pose.identity(24), np.zeros(9), 1.0, np.zeros(3))
    assert FitState(Pose.identity(24), np.zeros(10), 1.0, np.zeros(3)).per_joint_source == (ZEROED,) * 24


# estimate_global_rotations ----------------------------------------------------

def test_canonical_input_gives_identity(model):
    est = estimate_global_rotations(KeypointSet.certain(model.canonical_keypoints), model.canonical_keypoints,
                                    model.tree)
    assert max(r.angle for r in est.rotations) < 1e-7


def test_pose_and_recover_globals(model):
    rng = np.random.default_rng(0)
    t = model.tree
    for _ in range(20):
        pose = twist_free_pose(model, rng)
        X = KeypointSet.certain(posed_keypoints(model, pose))
        est = estimate_global_rotations(X, model.canonical_keypoints, t)
        truth = fk_keypoint_globals(model, pose)
        for k, tag in enumerate(est.tags):
            if tag == MULTI_CHILD:
                assert geodesic_angle(est.rotations[k], truth[k]) < 1e-4
            elif tag == ONE_CHILD:
                c = est.bone_child[k]
                bone = model.canonical_keypoints[c] - model.canonical_keypoints[k]
                obs = X.positions[c] - X.positions[k]
                np.testing.assert_allclose(est.rotations[k].apply(bone), obs, atol=1e-9)


def test_leaf_keypoints_identity(model):
    rng = np.random.default_rng(1)
    X = model.canonical_keypoints + rng.normal(scale=0.2, size=(26, 3))
    est = estimate_global_rotations(KeypointSet.certain(X), model.canonical_keypoints, model.tree)
    for k, kids in enumerate(model.tree.keypoint_children):
        if not kids:
            assert est.tags[k] == LEAF and est.rotations[k].angle == 0


def test_multi_child_fallback(model):
    t = model.tree
    conf = np.ones(26)
    neck = t.keypoint_index("neck")
    kids = t.keypoint_children[neck]
    conf[list(kids)] = 0
    conf[t.keypoint_index("nose")] = 0.7
    rng = np.random.default_rng(2)
    X = KeypointSet(model.canonical_keypoints + rng.normal(scale=0.01, size=(26, 3)), conf)
    est = estimate_global_rotations(X, model.canonical_keypoints, t)
    assert est.tags[neck] == ONE_CHILD and est.bone_child[neck] == t.keypoint_index("nose")


def test_all_zero_children_uses_floor(model):
    t = model.tree
    conf = np.ones(26)
    pel = t.keypoint_index("pelvis")
    conf[list(t.keypoint_children[pel])] = 0
    X = KeypointSet(model.canonical_keypoints, conf)
    est = estimate_global_rotations(X, model.canonical_keypoints, t)
    assert est.tags[pel] == MULTI_CHILD and est.rotations[pel].angle < 1e-7


def test_pair_selection_and_adjacent_options(model):
    rng = np.random.default_rng(3)
    pose = twist_free_pose(model, rng)
    X = KeypointSet.certain(posed_keypoints(model, pose))
    truth = fk_keypoint_globals(model, pose)
    for cfg in (ArticulationConfig(pair_selection=True), ArticulationConfig(neighborhood="adjacent")):
        est = estimate_global_rotations(X, model.canonical_keypoints, model.tree, cfg)
        pel = model.tree.keypoint_index("pelvis")
        assert geodesic_angle(est.rotations[pel], truth[pel]) < 1e-4
    with pytest.raises(ValueError):
        ArticulationConfig(neighborhood="everything")


# globals_to_locals / remove_twist ---------------------------------------------

def test_globals_to_locals_examples(model):
    t = model.tree
    ident = [Rotation.identity()] * 26
    assert all(r.angle == 0 for r in globals_to_locals(ident, t))
    r0 = Rotation.from_axis_angle([0.2, 0.5, -0.1])
    out = globals_to_locals([r0] * 26, t)
    assert geodesic_angle(out[0], r0) < 1e-12
    assert all(r.angle < 1e-7 for r in out[1:])


def test_globals_to_locals_fk_round_trip(model):
    rng = np.random.default_rng(4)
    t = model.tree
    pose = twist_free_pose(model, rng)
    g = fk_keypoint_globals(model, pose)
    g = [Rotation.identity() if r is None else r for r in g]
    loc = globals_to_locals(g, t)
    for k, j in t.keypoint_map:
        if j is not None and t.keypoint_children[k]:
            p = t.keypoint_parents[k]
            # only where the parent keypoint's joint is the model parent
            if p < 0 or t.joint_of_keypoint[p] == t.parents[j]:
                assert geodesic_angle(loc[k], pose.rotations[j]) < 1e-9


def test_remove_twist_pure_cases(model):
    t = model.tree
    can = model.canonical_keypoints
    k = t.keypoint_index("l_elbow")
    c = t.keypoint_children[k][0]
    axis = (can[c] - can[k]) / np.linalg.norm(can[c] - can[k])
    rots = [Rotation.identity()] * 26
    rots[k] = Rotation.from_axis_angle(0.8 * axis)
    assert remove_twist(rots, t, can)[k].angle < 1e-12
    perp = np.cross(axis, [0, 0, 1])
    rots[k] = Rotation.from_axis_angle(0.8 * perp / np.linalg.norm(perp))
    assert geodesic_angle(remove_twist(rots, t, can)[k], rots[k]) < 1e-12


def test_remove_twist_preserves_keypoints(model):
    rng = np.random.default_rng(5)
    t = model.tree
    for _ in range(20):
        pose = sample_pose(model, SynthSpec(twist_range=np.pi / 2), rng)
        X = KeypointSet.certain(posed_keypoints(model, pose))
        tr = KamaTrace(None)
        kama(model, X, ArticulationConfig(remove_twist=False), tr)
        before, _ = map_to_model_pose(tr.locals_raw, t, tr.estimate.tags)
        after, _ = map_to_model_pose(remove_twist(tr.locals_raw, t, model.canonical_keypoints,
                                                  tr.estimate.bone_child), t, tr.estimate.tags)
        np.testing.assert_allclose(posed_keypoints(model, before), posed_keypoints(model, after), atol=1e-7)


# map_to_model_pose ----------------------------------------------------------

def test_map_to_model_pose(model):
    t = model.tree
    pose, src = map_to_model_pose([Rotation.identity()] * 26, t)
    assert all(r.angle == 0 for r in pose.rotations) and len(pose) == 24
    rng = np.random.default_rng(6)
    rots = [Rotation.from_axis_angle(rng.normal(size=3)) for _ in range(26)]
    pose, _ = map_to_model_pose(rots, t)
    mapped = {j for _, j in t.keypoint_map if j is not None}
    for j in range(24):
        if j not in mapped:
            assert pose.rotations[j].angle == 0
    # the map is a set of pairs; listing them in another order changes nothing
    from kama.model import KinematicTree
    perm = KinematicTree(t.joint_names, t.parents, t.joint_positions, t.keypoint_names, t.keypoint_parents,
                         tuple(reversed(t.keypoint_map)))
    pose2, _ = map_to_model_pose(rots, perm)
    assert max(geodesic_angle(a, b) for a, b in zip(pose.rotations, pose2.rotations)) < 1e-12


# scale / translation ------------------------------------------------------------

def test_fit_global_scale_translation(model):
    rng = np.random.default_rng(7)
    pose = twist_free_pose(model, rng)
    kp = posed_keypoints(model, pose)
    s, t = fit_global_scale_translation(model, pose, KeypointSet.certain(kp))
    assert abs(s - 1) < 1e-9 and np.abs(t).max() < 1e-9
    s, t = fit_global_scale_translation(model, pose, KeypointSet.certain(1.2 * kp + [0.5, 0, 3]))
    assert abs(s - 1.2) < 1e-6 and np.allclose(t, [0.5, 0, 3], atol=1e-6)
    worst = 0.0
    for _ in range(100):
        noisy = KeypointSet.certain(kp + rng.normal(scale=0.005, size=kp.shape))
        worst = max(worst, abs(fit_global_scale_translation(model, pose, noisy)[0] - 1))
    assert worst < 0.05


# end to end ---------------------------------------------------------------------

def test_kama_scaled_canonical(model):
    X = KeypointSet.certain(0.9 * model.canonical_keypoints + [0.1, 0.2, 3.0])
    st = kama(model, X)
    assert max(r.angle for r in st.pose.rotations) < 1e-7
    assert abs(st.scale - 0.9) < 1e-9 and np.allclose(st.translation, [0.1, 0.2, 3.0], atol=1e-9)
    assert np.all(st.beta == 0)


def test_kama_round_trip_sources(model):
    rng = np.random.default_rng(8)
    pose = twist_free_pose(model, rng)
    st = kama(model, KeypointSet.certain(posed_keypoints(model, pose)))
    for j, k in estimable_joints(model.tree).items():
        assert geodesic_angle(st.pose.rotations[j], pose.rotations[j]) < 1e-6
        assert st.per_joint_source[j] in (ONE_CHILD, MULTI_CHILD)
    assert st.per_joint_source[model.tree.joint_index("spine1")] == ZEROED


def test_kama_similarity_equivariance(model):
    rng = np.random.default_rng(9)
    for _ in range(10):
        pose = twist_free_pose(model, rng)
        X = posed_keypoints(model, pose) + rng.normal(scale=0.01, size=(26, 3))
        conf = rng.uniform(0.2, 1, 26)
        a = kama(model, KeypointSet(X, conf))
        s0, t0 = rng.uniform(0.5, 2), rng.normal(size=3)
        b = kama(model, KeypointSet(s0 * X + t0, conf))
        assert max(geodesic_angle(p, q) for p, q in zip(a.pose.rotations, b.pose.rotations)) < 1e-6
        assert abs(b.scale - s0 * a.scale) < 1e-9
        np.testing.assert_allclose(b.translation, s0 * a.translation + t0, atol=1e-9)


def test_kama_recovers_positions_despite_true_twist(model):
    rng = np.random.default_rng(10)
    for _ in range(10):
        pose = sample_pose(model, SynthSpec(twist_range=np.pi / 2), rng)
        X = posed_keypoints(model, pose)
        st = kama(model, KeypointSet.certain(X))
        ev = [model.tree.keypoint_index(n) for n in ("l_knee", "l_ankle", "r_elbow", "r_wrist", "neck")]
        np.testing.assert_allclose(fit_keypoints(model, st)[ev], X[ev], atol=1e-6)


def test_confidence_zero_keypoint_is_ignored(model):
    rng = np.random.default_rng(11)
    pose = twist_free_pose(model, rng)
    X = posed_keypoints(model, pose) + rng.normal(scale=0.01, size=(26, 3))
    conf = rng.uniform(0.3, 1, 26)
    eye = model.tree.keypoint_index("l_eye")
    conf[eye] = 0
    a = kama(model, KeypointSet(X, conf))
    X2 = X.copy()
    X2[eye] += [0.3, -0.2, 0.5]
    b = kama(model, KeypointSet(X2, conf))
    assert max(geodesic_angle(p, q) for p, q in zip(a.pose.rotations, b.pose.rotations)) < 1e-12


def test_kama_runtime(model):
    rng = np.random.default_rng(12)
    frames = [KeypointSet.certain(posed_keypoints(model, twist_free_pose(model, rng))) for _ in range(30)]
    kama(model, frames[0])
    t0 = time.perf_counter()
    for X in frames:
        kama(model, X)
    assert (time.perf_counter() - t0) / len(frames) < 0.010


def test_kama_size_mismatch(model):
    with pytest.raises(SizeMismatch):
        kama(model, KeypointSet.certain(np.zeros((25, 3))))
