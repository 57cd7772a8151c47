import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_frames
from hoisim.kinematics import (DegenerateRotationError, InsufficientFramesError, VelocityProfile,
                               axis_angle_to_matrix, blend_transforms, fk_batch, forward_kinematics,
                               joint_position_jacobian, point_jacobian, rot6d_to_matrix,
                               select_contact_joint_and_frame, skin_splats, velocity_profile)
from hoisim.scene import IDENTITY_6D, MotionSequence, Skeleton, builtin_skeleton


def frame_of(J, r=(0, 0, 0), omega=IDENTITY_6D, theta=None):
    theta = np.zeros((J, 3)) if theta is None else np.asarray(theta, float)
    return np.concatenate([r, omega, theta.ravel()]).astype(float)


def test_rot6d_identity_and_scale():
    assert np.array_equal(rot6d_to_matrix(np.array([1.0, 0, 0, 0, 1, 0])), np.eye(3))
    assert np.allclose(rot6d_to_matrix(np.array([2.0, 0, 0, 0, 3, 0])), np.eye(3), atol=0)


@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6))
def test_rot6d_orthonormal(six):
    six = np.array(six)
    a, b = six[:3], six[3:]
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(np.cross(a, b)) < 1e-3 * np.linalg.norm(a) * (np.linalg.norm(b) + 1e-12):
        return
    R = rot6d_to_matrix(six)
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-10)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-10)
    assert np.allclose(R[:, 0], a / np.linalg.norm(a))


@pytest.mark.parametrize("six", [[0, 0, 0, 0, 1, 0], [1, 0, 0, 2, 0, 0], [1e-12, 0, 0, 0, 1, 0]])
def test_rot6d_degenerate(six):
    with pytest.raises(DegenerateRotationError):
        rot6d_to_matrix(np.array(six, float))


def test_axis_angle_quarter_turn():
    R = axis_angle_to_matrix(np.array([0, 0, math.pi / 2]))
    assert np.allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_zero_pose_gives_cumulative_offsets(skeleton):
    pf = forward_kinematics(skeleton, frame_of(24))
    assert np.allclose(pf.joint_positions, skeleton.rest_positions(), atol=1e-15)
    assert np.allclose(pf.rotations, np.eye(3))


def test_root_translation_shifts_everything(skeleton):
    p0 = forward_kinematics(skeleton, frame_of(24)).joint_positions
    p1 = forward_kinematics(skeleton, frame_of(24, r=(0, 0, 5))).joint_positions
    assert np.allclose(p1 - p0, [0, 0, 5], atol=1e-14)


def test_two_joint_chain_quarter_turn():
    # root, child, tip; child rotates 90 degrees about z
    skel = Skeleton(np.array([-1, 0, 1]), np.array([[0, 0, 0], [1, 0, 0], [1, 0, 0]], float))
    theta = np.zeros((3, 3))
    theta[1] = [0, 0, math.pi / 2]
    p = forward_kinematics(skel, frame_of(3, theta=theta)).joint_positions
    assert np.allclose(p[2], [1, 1, 0], atol=1e-15)


def test_rotation_blocks_orthonormal(skeleton, rng):
    pf = forward_kinematics(skeleton, random_frames(rng, 1)[0])
    R = pf.rotations
    assert np.allclose(np.swapaxes(R, 1, 2) @ R, np.eye(3), atol=1e-6)
    assert np.allclose(np.linalg.det(R), 1.0, atol=1e-6)


def test_global_rigid_equivariance(skeleton, rng):
    """A rotation about the root plus a translation moves every joint rigidly."""
    X = random_frames(rng, 1)[0]
    Q = rot6d_to_matrix(rng.normal(size=6))
    t = rng.normal(size=3)
    R0 = rot6d_to_matrix(X[3:9])
    Y = X.copy()
    R1 = Q @ R0
    Y[3:9] = np.concatenate([R1[:, 0], R1[:, 1]])
    root_rest = skeleton.rest_offsets[0]
    # root joint position p0 = r + off0; rotate about p0's image
    Y[:3] = Q @ (X[:3] + root_rest) + t - root_rest
    p = forward_kinematics(skeleton, X).joint_positions
    q = forward_kinematics(skeleton, Y).joint_positions
    assert np.allclose(q, p @ Q.T + t, atol=1e-12)


def test_skin_identity_pose_is_identity(human):
    pos = skin_splats(human, forward_kinematics(human.skeleton, frame_of(24)))
    assert np.allclose(pos, human.canonical_splats.positions, atol=1e-14)


def test_blend_transforms_linearity():
    I = np.eye(4)
    T = np.eye(4)
    T[:3, 3] = [0, 0, 2]
    pts = np.array([[0.3, -1.0, 4.0]])
    assert np.allclose(blend_transforms(np.stack([I, T]), np.array([[0.0, 1.0]]), pts), pts + [0, 0, 2])
    assert np.allclose(blend_transforms(np.stack([I, T]), np.array([[0.5, 0.5]]), pts), pts + [0, 0, 1])


def test_velocity_profile_static_and_uniform(skeleton):
    m = MotionSequence.rest(6, 24)
    assert np.all(velocity_profile(skeleton, m).speeds == 0)
    r = np.zeros((6, 3))
    r[:, 0] = 0.1 * np.arange(6)
    m = MotionSequence(r, np.tile(IDENTITY_6D, (6, 1)), np.zeros((6, 24, 3)))
    assert np.allclose(velocity_profile(skeleton, m).speeds, 0.1, atol=1e-12)


def test_velocity_profile_matches_per_frame_fk(skeleton):
    T = 15
    t = np.arange(T)
    theta = np.zeros((T, 24, 3))
    theta[:, 4, 0] = 0.6 * np.sin(0.5 * t)
    theta[:, 18, 2] = 0.3 * np.cos(0.3 * t)
    m = MotionSequence(np.zeros((T, 3)), np.tile(IDENTITY_6D, (T, 1)), theta)
    prof = velocity_profile(skeleton, m).speeds
    X = m.to_array()
    pos = np.stack([forward_kinematics(skeleton, X[k]).joint_positions for k in range(T)])
    oracle = np.linalg.norm(pos[1:] - pos[:-1], axis=2).T
    assert np.allclose(prof, oracle, atol=1e-14)
    assert prof.shape == (24, T - 1) and np.all(prof >= 0)


def test_velocity_profile_needs_two_frames(skeleton):
    with pytest.raises(InsufficientFramesError):
        velocity_profile(skeleton, MotionSequence.rest(1, 24))


def test_selection_unique_mover_and_peak():
    v = np.zeros((24, 30))
    v[7] = np.exp(-0.5 * ((np.arange(30) - 12) / 2.0) ** 2)
    assert select_contact_joint_and_frame(VelocityProfile(v)) == (7, 12)


def test_selection_tie_break():
    assert select_contact_joint_and_frame(VelocityProfile(np.full((24, 10), 0.3))) == (0, 0)


@given(scale=st.floats(1e-3, 1e3), seed=st.integers(0, 10 ** 6))
def test_selection_scale_invariant(scale, seed):
    v = np.random.default_rng(seed).random((24, 20))
    assert select_contact_joint_and_frame(VelocityProfile(v)) == select_contact_joint_and_frame(VelocityProfile(v * scale))


def test_jacobian_translation_block_and_descendants(skeleton, rng):
    X = random_frames(rng, 1)[0]
    Jm = joint_position_jacobian(skeleton, X, 7)  # left ankle
    assert np.allclose(Jm[:, :3], np.eye(3))
    chain = set(skeleton.chain(7))
    for j in range(24):
        cols = Jm[:, 9 + 3 * j:12 + 3 * j]
        # a joint's own rotation does not move its own position
        if j not in chain or j == 7:
            assert np.all(cols == 0), j


def _fd(skeleton, X, joint, h=1e-5):
    out = np.zeros((3, X.size))
    for k in range(X.size):
        e = np.zeros_like(X)
        e[k] = h
        out[:, k] = (fk_batch(skeleton, X + e)[1][joint] - fk_batch(skeleton, X - e)[1][joint]) / (2 * h)
    return out


@pytest.mark.parametrize("joint", [10, 15, 21])
def test_jacobian_matches_finite_differences(skeleton, rng, joint):
    for X in random_frames(rng, 3):
        Jm = joint_position_jacobian(skeleton, X, joint)
        fd = _fd(skeleton, X, joint)
        assert np.linalg.norm(Jm - fd) / np.linalg.norm(fd) < 1e-5


def test_jacobian_at_zero_pose(skeleton):
    X = frame_of(24)
    fd = _fd(skeleton, X, 10)
    assert np.linalg.norm(joint_position_jacobian(skeleton, X, 10) - fd) < 1e-8


def test_point_jacobian_batch_shape(skeleton, rng):
    X = random_frames(rng, 4)
    pj = point_jacobian(skeleton, X, 10, rng.normal(size=(5, 3)))
    assert pj.shape == (4, 5, 3, 9 + 72)


def test_jacobian_propagates_degenerate_rotation(skeleton):
    X = frame_of(24, omega=np.zeros(6))
    with pytest.raises(DegenerateRotationError):
        joint_position_jacobian(skeleton, X, 3)


def test_dimension_mismatch(skeleton):
    with pytest.raises(ValueError):
        forward_kinematics(skeleton, np.zeros(20))


def test_kick_selects_left_foot_at_peak(skeleton, kick):
    assert select_contact_joint_and_frame(velocity_profile(skeleton, kick)) == (10, 20)


def test_builtin_skeleton_is_tree():
    s = builtin_skeleton()
    assert list(s.validate("s")) == []
    assert s.chain(10) == [0, 1, 4, 7, 10]
