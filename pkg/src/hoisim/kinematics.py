"""Forward kinematics, linear blend skinning, velocity profiles and analytic
pose Jacobians.

Frame vectors use the layout ``[r (3) | omega (6) | theta (3J)]``.  Every
batched helper accepts arbitrary leading dimensions on the frame array.

Joint transforms compose parent-to-child as ``G_j = G_parent T(offset_j) R(theta_j)``
with the root ``G_0 = T(r + offset_0) R6(omega) R(theta_0)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import MotionSequence, SkinnedHuman, Skeleton

SMALL_ANGLE = 1e-3


class DegenerateRotationError(ValueError):
    pass


class InsufficientFramesError(ValueError):
    pass


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def _rodrigues_coeffs(theta):
    """a = sin(t)/t, b = (1-cos t)/t^2 and their (d/dt)/t companions."""
    th2 = theta * theta
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    s, c = np.sin(safe), np.cos(safe)
    a = np.where(small, 1.0 - th2 / 6.0 + th2 * th2 / 120.0, s / safe)
    b = np.where(small, 0.5 - th2 / 24.0 + th2 * th2 / 720.0, (1.0 - c) / safe ** 2)
    da = np.where(small, -1.0 / 3.0 + th2 / 30.0, (safe * c - s) / safe ** 3)
    db = np.where(small, -1.0 / 12.0 + th2 / 180.0, (safe * s - 2.0 * (1.0 - c)) / safe ** 4)
    return a, b, da, db


def axis_angle_to_matrix(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    a, b, _, _ = _rodrigues_coeffs(np.linalg.norm(v, axis=-1))
    K = skew(v)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def axis_angle_derivatives(v: np.ndarray) -> np.ndarray:
    """dR/dv_i stacked on a new axis: shape ``v.shape[:-1] + (3, 3, 3)``."""
    v = np.asarray(v, dtype=np.float64)
    a, b, da, db = _rodrigues_coeffs(np.linalg.norm(v, axis=-1))
    K = skew(v)
    K2 = K @ K
    E = skew(np.eye(3))  # E[i] = [e_i]x
    Kx = K[..., None, :, :]
    Ei = E
    out = (a[..., None, None, None] * Ei
           + b[..., None, None, None] * (Ei @ Kx + Kx @ Ei)
           + (da[..., None] * v)[..., None, None] * K[..., None, :, :]
           + (db[..., None] * v)[..., None, None] * K2[..., None, :, :])
    return out


def rot6d_to_matrix(six: np.ndarray) -> np.ndarray:
    """Gram-Schmidt on the two column triples; columns of the result are b1, b2, b1 x b2."""
    six = np.asarray(six, dtype=np.float64)
    a1, a2 = six[..., :3], six[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1)
    if np.any(n1 <= 1e-8):
        raise DegenerateRotationError("6D rotation has a near-zero first column")
    b1 = a1 / n1[..., None]
    u = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    nu = np.linalg.norm(u, axis=-1)
    if np.any(nu <= 1e-8 * np.maximum(1.0, np.linalg.norm(a2, axis=-1))):
        raise DegenerateRotationError("6D rotation columns are parallel")
    b2 = u / nu[..., None]
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def rot6d_derivatives(six: np.ndarray) -> np.ndarray:
    """dR/d(six_m): shape ``six.shape[:-1] + (6, 3, 3)``."""
    six = np.asarray(six, dtype=np.float64)
    R = rot6d_to_matrix(six)
    a1, a2 = six[..., :3], six[..., 3:6]
    b1, b2 = R[..., :, 0], R[..., :, 1]
    n1 = np.linalg.norm(a1, axis=-1)[..., None, None]
    u = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    nu = np.linalg.norm(u, axis=-1)[..., None, None]
    I = np.eye(3)
    # Jacobians w.r.t. the 6 inputs, each (..., 3, 6)
    db1 = np.zeros(six.shape[:-1] + (3, 6))
    db1[..., :, :3] = (I - b1[..., :, None] * b1[..., None, :]) / n1
    # du = da2 - (db1^T a2) b1 - (b1 . a2) db1, with b1 . da2 on the a2 block
    b1a2 = np.sum(b1 * a2, axis=-1)[..., None, None]
    a2_db1 = np.einsum("...k,...kc->...c", a2, db1)
    du = -b1[..., :, None] * a2_db1[..., None, :] - b1a2 * db1
    du[..., :, 3:] += I - b1[..., :, None] * b1[..., None, :]
    db2 = np.einsum("...ij,...jc->...ic", (I - b2[..., :, None] * b2[..., None, :]) / nu, du)
    db3 = np.cross(db1, b2[..., :, None], axis=-2) + np.cross(b1[..., :, None], db2, axis=-2)
    dR = np.stack([db1, db2, db3], axis=-2)  # (..., 3 rows, 3 cols, 6)
    return np.moveaxis(dR, -1, -3)


@dataclass(frozen=True, eq=False)
class PosedFrame:
    joint_transforms: np.ndarray  # (J, 4, 4) world transforms G_k
    joint_positions: np.ndarray  # (J, 3)

    @property
    def rotations(self) -> np.ndarray:
        return self.joint_transforms[:, :3, :3]

    def skinning_transforms(self, rest_positions: np.ndarray) -> np.ndarray:
        """``G_k T(-rest_k)``: maps canonical-pose points to posed world space."""
        A = self.joint_transforms.copy()
        A[:, :3, 3] -= np.einsum("kij,kj->ki", self.rotations, rest_positions)
        return A


def _split(skeleton: Skeleton, frames: np.ndarray):
    frames = np.asarray(frames, dtype=np.float64)
    J = skeleton.joint_count
    if frames.shape[-1] != 9 + 3 * J:
        raise ValueError(f"frame dimension {frames.shape[-1]} does not match "
                         f"skeleton with {J} joints (expected {9 + 3 * J})")
    lead = frames.shape[:-1]
    return frames[..., :3], frames[..., 3:9], frames[..., 9:].reshape(lead + (J, 3))


def fk_batch(skeleton: Skeleton, frames: np.ndarray):
    """World joint rotations ``(..., J, 3, 3)`` and positions ``(..., J, 3)``."""
    r, omega, theta = _split(skeleton, frames)
    R6 = rot6d_to_matrix(omega)
    Rl = axis_angle_to_matrix(theta)
    J = skeleton.joint_count
    Rw = np.empty(Rl.shape)
    p = np.empty(theta.shape)
    off = skeleton.rest_offsets
    Rw[..., 0, :, :] = R6 @ Rl[..., 0, :, :]
    p[..., 0, :] = r + off[0]
    for j in range(1, J):
        q = skeleton.parent[j]
        p[..., j, :] = p[..., q, :] + Rw[..., q, :, :] @ off[j]
        Rw[..., j, :, :] = Rw[..., q, :, :] @ Rl[..., j, :, :]
    return Rw, p


def forward_kinematics(skeleton: Skeleton, frame) -> PosedFrame:
    Rw, p = fk_batch(skeleton, frame)
    G = np.zeros(Rw.shape[:-2] + (4, 4))
    G[..., :3, :3] = Rw
    G[..., :3, 3] = p
    G[..., 3, 3] = 1.0
    return PosedFrame(G, p)


def joint_positions(skeleton: Skeleton, motion: MotionSequence) -> np.ndarray:
    """(T, J, 3) world joint positions for a whole motion."""
    return fk_batch(skeleton, motion.to_array())[1]


def blend_transforms(transforms: np.ndarray, weights: np.ndarray, points: np.ndarray) -> np.ndarray:
    """``(sum_k w_ik G_k) mu_i`` in homogeneous coordinates."""
    blended = np.einsum("nk,kab->nab", weights, transforms)
    return np.einsum("nab,nb->na", blended[:, :3, :3], points) + blended[:, :3, 3]


def skin_splats(human: SkinnedHuman, frame: PosedFrame) -> np.ndarray:
    A = frame.skinning_transforms(human.skeleton.rest_positions())
    return blend_transforms(A, human.skinning_weights, human.canonical_splats.positions)


def skin_points_batch(skeleton: Skeleton, frames: np.ndarray, joint: int, canonical: np.ndarray) -> np.ndarray:
    """Rigidly skinned points of one joint for a stack of frames: (..., M, 3)."""
    Rw, p = fk_batch(skeleton, frames)
    local = np.asarray(canonical) - skeleton.rest_positions()[joint]
    return np.einsum("...ij,mj->...mi", Rw[..., joint, :, :], local) + p[..., joint, None, :]


@dataclass(frozen=True, eq=False)
class VelocityProfile:
    per_joint_per_frame_speed: np.ndarray  # (J, T-1), meters per frame

    @property
    def speeds(self) -> np.ndarray:
        return self.per_joint_per_frame_speed


def velocity_profile(skeleton: Skeleton, motion: MotionSequence) -> VelocityProfile:
    if motion.frame_count < 2:
        raise InsufficientFramesError("velocity profile needs at least 2 frames")
    p = joint_positions(skeleton, motion)
    v = np.linalg.norm(np.diff(p, axis=0), axis=-1)
    return VelocityProfile(v.T.copy())


def select_contact_joint_and_frame(profile: VelocityProfile) -> tuple[int, int]:
    v = np.asarray(profile.per_joint_per_frame_speed)
    if v.size == 0:
        raise ValueError("empty velocity profile")
    j = int(np.argmax(v.sum(axis=1)))
    return j, int(np.argmax(v[j]))


def point_jacobian(skeleton: Skeleton, frames: np.ndarray, joint: int, local_points: np.ndarray) -> np.ndarray:
    """Jacobian of world points rigidly attached to ``joint`` w.r.t. frame parameters.

    ``local_points`` are expressed in the joint's frame (``(M, 3)``); the world
    point is ``p_joint + R_joint @ local``.  Returns ``(..., M, 3, D)``.
    """
    frames = np.asarray(frames, dtype=np.float64)
    _, omega, theta = _split(skeleton, frames)
    J = skeleton.joint_count
    if not 0 <= joint < J:
        raise IndexError(f"joint {joint} out of range for {J} joints")
    local_points = np.atleast_2d(np.asarray(local_points, dtype=np.float64))
    Rw, p = fk_batch(skeleton, frames)
    R6 = rot6d_to_matrix(omega)
    dR6 = rot6d_derivatives(omega)
    lead = frames.shape[:-1]
    M = local_points.shape[0]
    x = np.einsum("...ij,mj->...mi", Rw[..., joint, :, :], local_points) + p[..., joint, None, :]

    jac = np.zeros(lead + (M, 3, 9 + 3 * J))
    jac[..., 0, 0] = jac[..., 1, 1] = jac[..., 2, 2] = 1.0
    d0 = x - p[..., 0, None, :]
    # d x / d omega_m = dR6_m R6^T (x - p_0)
    A = np.einsum("...mab,...cb->...mac", dR6, R6)
    jac[..., 3:9] = np.einsum("...kac,...nc->...nak", A, d0)

    for k in skeleton.chain(joint):
        dRl = axis_angle_derivatives(theta[..., k, :])  # (..., 3, 3, 3)
        Rpar = R6 if k == 0 else Rw[..., skeleton.parent[k], :, :]
        y = np.einsum("...ba,...mb->...ma", Rw[..., k, :, :], x - p[..., k, None, :])
        cols = np.einsum("...ab,...ibc,...mc->...mai", Rpar, dRl, y)
        jac[..., 9 + 3 * k:12 + 3 * k] = cols
    return jac


def joint_position_jacobian(skeleton: Skeleton, frame, joint: int) -> np.ndarray:
    """(3, D) Jacobian of the world position of ``joint`` (or (..., 3, D) for stacked frames)."""
    return point_jacobian(skeleton, frame, joint, np.zeros((1, 3)))[..., 0, :, :]
