"""Body model: shape basis, FK, skinning, and the model file format."""

import numpy as np
import pytest

from drape import autodiff as ad
from drape.body import (BodyError, BodyModel, PoseParams, body_transforms,
                        forward_kinematics, lbs, lbs_t, load_body, pose_body,
                        rodrigues, rodrigues_t, save_body, shaped_template,
                        skeleton_joints)
from drape.geometry import build_topology
from drape.synth import default_scene, make_synthetic_body


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# -- rodrigues -----------------------------------------------------------------

def test_rodrigues_quarter_turn_about_z():
    R = rodrigues(np.array([0.0, 0.0, np.pi / 2]))
    assert np.allclose(R, rot_z(np.pi / 2), atol=1e-15)


def test_rodrigues_tiny_angle_matches_first_order():
    r = np.array([1e-9, -2e-9, 0.5e-9])
    R = rodrigues(r)
    approx = np.eye(3) + np.array([[0.0, -r[2], r[1]],
                                   [r[2], 0.0, -r[0]],
                                   [-r[1], r[0], 0.0]])
    assert np.allclose(R, approx, atol=1e-17)


def test_rodrigues_batch_is_orthonormal():
    rng = np.random.default_rng(3)
    r = rng.normal(0.0, 1.0, (10, 3))
    R = rodrigues(r)
    eye = np.broadcast_to(np.eye(3), (10, 3, 3))
    assert np.allclose(R @ R.transpose(0, 2, 1), eye, atol=1e-14)
    assert np.allclose(np.linalg.det(R), 1.0, atol=1e-14)


def test_rodrigues_t_matches_plain():
    rng = np.random.default_rng(4)
    r = rng.normal(0.0, 0.8, (6, 3))
    r[0] = 0.0  # exercise the series branch too
    R_t = rodrigues_t(ad.Tensor(r, requires_grad=True))
    assert np.allclose(R_t.data, rodrigues(r), atol=1e-14)


# -- shape basis and skeleton ---------------------------------------------------

def test_shaped_template_linearity():
    body = make_synthetic_body()
    base = shaped_template(body, np.zeros(10))
    assert np.array_equal(base.vertices, body.template.vertices)

    e1 = np.zeros(10)
    e1[0] = 1.0
    d1 = shaped_template(body, e1).vertices - base.vertices
    d2 = shaped_template(body, 2.0 * e1).vertices - base.vertices
    assert np.allclose(d1, body.shape_basis[0], atol=1e-15)
    assert np.allclose(d2, 2.0 * d1, atol=1e-15)


def test_skeleton_joints_regressor_rows():
    body = make_synthetic_body()
    joints = skeleton_joints(body, np.zeros(10))
    # every regressor row averages one ring of the capsule, so each joint
    # sits on the axis at that ring's height
    assert np.allclose(joints[:, 0], 0.0, atol=1e-12)
    assert np.allclose(joints[:, 2], 0.0, atol=1e-12)
    row = body.joint_regressor[0]
    expected = row @ body.template.vertices
    assert np.allclose(joints[0], expected, atol=1e-15)


# -- forward kinematics ----------------------------------------------------------

def test_fk_zero_pose_is_identity():
    joints = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    T = forward_kinematics(np.zeros(9), joints, np.array([-1, 0, 1]))
    assert np.allclose(T, np.broadcast_to(np.eye(4), (3, 4, 4)), atol=1e-15)


def test_fk_root_rotation_is_global():
    joints = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.5, 0.5, 0.0]])
    theta = np.zeros(9)
    theta[2] = np.pi / 2
    T = forward_kinematics(theta, joints, np.array([-1, 0, 1]))
    R = rot_z(np.pi / 2)
    for j in range(3):
        assert np.allclose(T[j, :3, :3], R, atol=1e-14)
        # rest joint j must land on R (j - j0) + j0 with j0 the root
        posed = T[j, :3, :3] @ joints[j] + T[j, :3, 3]
        assert np.allclose(posed, R @ joints[j], atol=1e-14)


def test_fk_two_bone_bend_hand_composed():
    """Child bent 90 deg about z: the end transform is the hand product."""
    joints = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    theta = np.array([0.0, 0.0, 0.0, 0.0, 0.0, np.pi / 2])
    T = forward_kinematics(theta, joints, np.array([-1, 0]))

    local = np.eye(4)
    local[:3, :3] = rot_z(np.pi / 2)
    local[:3, 3] = joints[1]
    unpose = np.eye(4)
    unpose[:3, 3] = -joints[1]
    expected = local @ unpose
    assert np.allclose(T[1], expected, atol=1e-14)
    # a point at (2,0,0) swings to (1,1,0)
    p = T[1, :3, :3] @ np.array([2.0, 0.0, 0.0]) + T[1, :3, 3]
    assert np.allclose(p, [1.0, 1.0, 0.0], atol=1e-14)


def test_fk_cyclic_parents_rejected():
    joints = np.zeros((2, 3))
    with pytest.raises(BodyError, match="cycle"):
        forward_kinematics(np.zeros(6), joints, np.array([-1, 1]))


def test_fk_wrong_theta_length():
    with pytest.raises(BodyError, match="joint count"):
        forward_kinematics(np.zeros(5), np.zeros((2, 3)), np.array([-1, 0]))


# -- linear blend skinning -------------------------------------------------------

def test_lbs_identity_transforms():
    rng = np.random.default_rng(0)
    v = rng.normal(0.0, 1.0, (7, 3))
    w = np.full((7, 2), 0.5)
    T = np.broadcast_to(np.eye(4), (2, 4, 4))
    assert np.allclose(lbs(v, w, T), v, atol=1e-15)


def test_lbs_single_joint_translation():
    v = np.zeros((3, 3))
    w = np.zeros((3, 2))
    w[:, 1] = 1.0
    T = np.stack([np.eye(4), np.eye(4)])
    T[1, :3, 3] = (1.0, 2.0, 3.0)
    assert np.allclose(lbs(v, w, T), [[1.0, 2.0, 3.0]] * 3, atol=1e-15)


def test_lbs_blends_translations_linearly():
    v = np.array([[1.0, 0.0, 0.0]])
    w = np.array([[0.5, 0.5]])
    T = np.stack([np.eye(4), np.eye(4)])
    T[0, :3, 3] = (1.0, 0.0, 0.0)
    T[1, :3, 3] = (0.0, 1.0, 0.0)
    assert np.allclose(lbs(v, w, T), [[1.5, 0.5, 0.0]], atol=1e-15)


def test_lbs_dimension_mismatch():
    with pytest.raises(BodyError, match="dimension"):
        lbs(np.zeros((3, 3)), np.zeros((4, 2)), np.zeros((2, 4, 4)))


def test_lbs_t_matches_plain_and_backpropagates():
    rng = np.random.default_rng(1)
    v = rng.normal(0.0, 0.3, (5, 3))
    w = rng.dirichlet(np.ones(3), size=5)
    theta = rng.normal(0.0, 0.4, (3, 3))
    T = np.empty((3, 4, 4))
    for j in range(3):
        T[j] = np.eye(4)
        T[j, :3, :3] = rodrigues(theta[j])
        T[j, :3, 3] = rng.normal(0.0, 0.1, 3)

    vt = ad.Tensor(v, requires_grad=True)
    wt = ad.Tensor(w, requires_grad=True)
    out = lbs_t(vt, wt, T)
    assert np.allclose(out.data, lbs(v, w, T), atol=1e-14)

    loss = ad.sum_(out * out)
    ad.backward(loss)
    # finite-difference a couple of coordinates
    for arr, grad, idx in ((v, vt.grad, (2, 1)), (w, wt.grad, (4, 0))):
        h = 1e-6
        bumped = arr.copy()
        bumped[idx] += h
        hi = ((lbs(bumped, w, T) if arr is v else lbs(v, bumped, T)) ** 2).sum()
        bumped[idx] -= 2 * h
        lo = ((lbs(bumped, w, T) if arr is v else lbs(v, bumped, T)) ** 2).sum()
        fd = (hi - lo) / (2 * h)
        assert abs(fd - grad[idx]) < 1e-6 * max(1.0, abs(fd))


# -- posing the full body --------------------------------------------------------

def test_pose_body_zero_pose_reproduces_template():
    body = make_synthetic_body()
    posed = pose_body(body, PoseParams.rest())
    err = np.abs(posed.vertices - body.template.vertices).max()
    assert err <= 1e-7


def test_pose_body_root_rotation_is_rigid():
    body = make_synthetic_body()
    theta = np.zeros(72)
    theta[0:3] = (0.0, 0.4, 0.0)
    posed = pose_body(body, PoseParams(theta, np.zeros(10)))

    root = skeleton_joints(body, np.zeros(10))[0]
    R = rodrigues(theta[:3])
    expected = (body.template.vertices - root) @ R.T + root
    assert np.abs(posed.vertices - expected).max() <= 1e-6

    topo = build_topology(body.template)
    diffs = posed.vertices[topo.edges[:, 0]] - posed.vertices[topo.edges[:, 1]]
    assert np.abs(np.linalg.norm(diffs, axis=1)
                  - topo.rest_edge_lengths).max() <= 1e-6


def test_garment_root_rotation_preserves_edge_lengths():
    body, rig = default_scene()
    theta = np.zeros(72)
    theta[0:3] = (0.3, -0.2, 0.5)
    params = PoseParams(theta, np.zeros(10))
    from drape.garment import pose_garment
    posed = pose_garment(rig, np.zeros_like(rig.template.vertices), body,
                         params)
    edges = rig.topology.edges
    diffs = posed.vertices[edges[:, 0]] - posed.vertices[edges[:, 1]]
    assert np.abs(np.linalg.norm(diffs, axis=1)
                  - rig.topology.rest_edge_lengths).max() <= 1e-6


def test_pose_body_with_pose_basis_matches_manual_composition():
    body = make_synthetic_body()
    rng = np.random.default_rng(9)
    pose_basis = rng.normal(0.0, 0.001, (207, body.template.num_vertices, 3))
    with_bp = BodyModel(template=body.template, shape_basis=body.shape_basis,
                        joint_regressor=body.joint_regressor,
                        parents=body.parents,
                        blend_weights=body.blend_weights,
                        pose_basis=pose_basis)
    theta = np.zeros(72)
    theta[5] = 0.7
    params = PoseParams(theta, np.zeros(10))

    rots = rodrigues(theta.reshape(-1, 3)[1:])
    feat = (rots - np.eye(3)).reshape(-1)
    corrected = body.template.vertices + np.tensordot(feat, pose_basis, axes=1)
    T = body_transforms(body, params)
    expected = lbs(corrected, body.blend_weights, T)
    assert np.allclose(pose_body(with_bp, params).vertices, expected,
                       atol=1e-12)


def test_pose_params_validation():
    with pytest.raises(BodyError, match="72"):
        PoseParams(np.zeros(10), np.zeros(10))
    with pytest.raises(BodyError, match="10"):
        PoseParams(np.zeros(72), np.zeros(3))


def test_body_model_rejects_bad_weights():
    body = make_synthetic_body()
    bad = body.blend_weights.copy()
    bad[0] *= 2.0
    with pytest.raises(BodyError, match="convex"):
        BodyModel(template=body.template, shape_basis=body.shape_basis,
                  joint_regressor=body.joint_regressor, parents=body.parents,
                  blend_weights=bad)


# -- model files -----------------------------------------------------------------

def test_body_save_load_round_trip(tmp_path):
    body = make_synthetic_body()
    save_body(body, tmp_path / "body")
    loaded = load_body(tmp_path / "body")

    assert np.array_equal(loaded.template.faces, body.template.faces)
    # vertices go through the OBJ text format
    assert np.abs(loaded.template.vertices - body.template.vertices).max() < 1e-7
    assert np.array_equal(loaded.parents, body.parents)
    # sparse triplets are written as exact decimal floats
    assert np.allclose(loaded.blend_weights, body.blend_weights, atol=1e-12)
    assert np.allclose(loaded.joint_regressor, body.joint_regressor,
                       atol=1e-12)
    # dense bases round-trip through f32
    assert np.abs(loaded.shape_basis - body.shape_basis).max() < 1e-7

    posed_a = pose_body(body, PoseParams.rest())
    posed_b = pose_body(loaded, PoseParams.rest())
    assert np.abs(posed_a.vertices - posed_b.vertices).max() < 1e-6


def test_load_body_missing_files(tmp_path):
    with pytest.raises(BodyError, match="body.obj"):
        load_body(tmp_path)
