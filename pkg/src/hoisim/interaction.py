"""Human-object coupling: windowed attraction, contact detection, impulse
response and the contact-window penetration penalty."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .kinematics import fk_batch, joint_position_jacobian, point_jacobian
from .mpm import ObjectTrajectory
from .scene import ContactParams, MotionSequence, SkinnedHuman, Skeleton


class ContactError(RuntimeError):
    pass


class ContactAtFirstFrameError(ContactError):
    pass


class SeparatingContactError(ContactError):
    pass


@dataclass(frozen=True, eq=False)
class ContactEvent:
    frame: int
    joint: int
    normal: np.ndarray
    human_velocity: np.ndarray
    object_velocity_pre: np.ndarray
    post_velocity_delta: np.ndarray
    restitution: float
    contact_fraction: float

    @property
    def approach_speed(self) -> float:
        return float((self.human_velocity - self.object_velocity_pre) @ self.normal)

    @property
    def post_velocity(self) -> np.ndarray:
        return self.object_velocity_pre + self.post_velocity_delta

    def to_dict(self) -> dict:
        return {"frame": self.frame, "joint": self.joint, "normal": self.normal.tolist(),
                "human_velocity": self.human_velocity.tolist(),
                "object_velocity_pre": self.object_velocity_pre.tolist(),
                "post_velocity_delta": self.post_velocity_delta.tolist(),
                "post_velocity": self.post_velocity.tolist(), "approach_speed": self.approach_speed,
                "restitution": self.restitution, "contact_fraction": self.contact_fraction}

    @classmethod
    def from_dict(cls, d: dict) -> "ContactEvent":
        return cls(int(d["frame"]), int(d["joint"]), np.array(d["normal"]), np.array(d["human_velocity"]),
                   np.array(d["object_velocity_pre"]), np.array(d["post_velocity_delta"]),
                   float(d["restitution"]), float(d["contact_fraction"]))


def gaussian_window(T: int, t_star: int, sigma: float, half_window: Optional[int] = None):
    """Frames in the attraction window and their weights ``exp(-(t - t*)^2 / (2 sigma^2))``."""
    radius = math.ceil(3.0 * sigma) if half_window is None else int(half_window)
    frames = np.arange(max(0, t_star - radius), min(T, t_star + radius + 1))
    return frames, np.exp(-((frames - t_star) ** 2) / (2.0 * sigma * sigma))


def attraction_loss(motion: MotionSequence, skeleton: Skeleton, trajectory: ObjectTrajectory,
                    j_star: int, t_star: int, sigma: float, half_window: Optional[int] = None,
                    with_grad: bool = True):
    """Gaussian-weighted mean squared distance between joint ``j_star`` and the
    object COM; returns ``(loss, dL/dX)`` with ``X`` the ``(T, D)`` motion array
    (the gradient is None when ``with_grad`` is false).  The object trajectory
    is treated as a constant."""
    T = motion.frame_count
    if not 0 <= t_star < T:
        raise ValueError(f"t*={t_star} outside [0, {T})")
    frames, g = gaussian_window(T, t_star, sigma, half_window)
    X = motion.to_array()
    _, p = fk_batch(skeleton, X[frames])
    resid = p[:, j_star] - trajectory.com[frames]
    norm = g.sum()
    loss = float(g @ np.sum(resid * resid, axis=1) / norm)
    if not with_grad:
        return loss, None
    jac = joint_position_jacobian(skeleton, X[frames], j_star)  # (F, 3, D)
    grad = np.zeros_like(X)
    grad[frames] = (2.0 * g / norm)[:, None] * np.einsum("fa,fad->fd", resid, jac)
    return loss, grad


def assign_gaussians_to_joints(human: SkinnedHuman) -> np.ndarray:
    return np.argmax(human.skinning_weights, axis=1)


def skinned_positions(human: SkinnedHuman, frames: np.ndarray) -> np.ndarray:
    """World splat positions for a stack of frame vectors: (F, N, 3)."""
    Rw, p = fk_batch(human.skeleton, frames)
    rest = human.skeleton.rest_positions()
    trans = p - np.einsum("fkij,kj->fki", Rw, rest)
    W = human.skinning_weights
    R = np.einsum("nk,fkij->fnij", W, Rw)
    t = np.einsum("nk,fki->fni", W, trans)
    return np.einsum("fnij,nj->fni", R, human.canonical_splats.positions) + t


def _aabb_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    return bool(np.all(a.min(0) <= b.max(0)) and np.all(b.min(0) <= a.max(0)))


def impulse_response(v_human, v_obj, normal, restitution: float) -> np.ndarray:
    """``V_obj + (1 + e) v_in n`` with ``v_in = (V_human - V_obj) . n``."""
    v_human = np.asarray(v_human, dtype=np.float64)
    v_obj = np.asarray(v_obj, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    v_in = (v_human - v_obj) @ n
    if not v_in > 0:
        raise SeparatingContactError(f"separating contact (v_in = {v_in:.3g})")
    return v_obj + (1.0 + restitution) * v_in * n


def detect_contact(human: SkinnedHuman, motion: MotionSequence, trajectory: ObjectTrajectory,
                   params: ContactParams, restitution: float = 0.6) -> Optional[ContactEvent]:
    """Earliest approaching contact between a joint's splats and the object."""
    T = motion.frame_count
    if trajectory.frame_count != T:
        raise ValueError(f"motion has {T} frames, trajectory {trajectory.frame_count}")
    X = motion.to_array()
    splats = skinned_positions(human, X)
    owner = assign_gaussians_to_joints(human)
    joints = [j for j in range(human.skeleton.joint_count) if np.any(owner == j)]
    members = {j: np.flatnonzero(owner == j) for j in joints}
    _, jp = fk_batch(human.skeleton, X)
    d = params.d_contact

    for t in range(T):
        obj = trajectory.positions[t]
        tree = None
        best = None  # (fraction, joint)
        for j in joints:
            pts = splats[t, members[j]]
            if not _aabb_overlap(pts, obj):
                continue
            tree = cKDTree(obj) if tree is None else tree
            dist, _ = tree.query(pts, k=1, distance_upper_bound=2.0 * d)
            frac = np.count_nonzero(dist <= d) / len(pts)
            if frac >= params.tau_contact and (best is None or frac > best[0]):
                best = (frac, j)
        if best is None:
            continue
        if t == 0:
            raise ContactAtFirstFrameError("contact at frame 0: no previous frame to estimate velocity")
        frac, j = best
        pts = splats[t, members[j]]
        near = cKDTree(pts).query(obj, k=1, distance_upper_bound=2.0 * d)[0] <= d
        com = trajectory.com[t]
        normal = com - obj[near].mean(axis=0)
        if np.linalg.norm(normal) < 1e-9:
            normal = com - jp[t, j]
        normal = normal / np.linalg.norm(normal)
        v_human = (jp[t, j] - jp[t - 1, j]) * motion.fps
        if params.object_velocity == "contact":
            v_obj = trajectory.frame_velocities(t)[near].mean(axis=0)
        else:
            v_obj = trajectory.com_velocity(t)
        v_in = float((v_human - v_obj) @ normal)
        if v_in <= 0:
            continue
        v_post = impulse_response(v_human, v_obj, normal, restitution)
        return ContactEvent(t, j, normal, v_human, v_obj, v_post - v_obj, restitution, float(frac))
    return None


def _joint_splat_jacobian(human: SkinnedHuman, frames: np.ndarray, idx: np.ndarray):
    """World positions (F, M, 3) and Jacobians (F, M, 3, D) of the splats ``idx``."""
    skel = human.skeleton
    rest = skel.rest_positions()
    W = human.skinning_weights[idx]
    mu = human.canonical_splats.positions[idx]
    F = frames.shape[0]
    D = frames.shape[1]
    pos = np.zeros((F, len(idx), 3))
    jac = np.zeros((F, len(idx), 3, D))
    Rw, p = fk_batch(skel, frames)
    for k in np.flatnonzero(np.any(W > 0, axis=0)):
        local = mu - rest[k]
        w = W[:, k]
        pos += w[None, :, None] * (np.einsum("fij,mj->fmi", Rw[:, k], local) + p[:, k, None, :])
        jac += w[None, :, None, None] * point_jacobian(skel, frames, int(k), local)
    return pos, jac


def refinement_window(T: int, t_c: int, half_window: int) -> np.ndarray:
    return np.arange(max(0, t_c - half_window), min(T, t_c + half_window + 1))


def masked_refinement_loss(human: SkinnedHuman, motion: MotionSequence, trajectory: ObjectTrajectory,
                           t_c: int, half_window: int, joint: int, d_contact: float = 0.01):
    """Penetration penalty on the contact joint's splats inside ``[t_c - dt, t_c + dt]``.

    Per frame the penalty is the mean over the joint's splats of
    ``max(0, d_contact - dist)^2`` with ``dist`` the distance to the nearest
    object particle.  Frames outside the window contribute exactly nothing.
    """
    if half_window < 0:
        raise ValueError("half_window must be >= 0")
    X = motion.to_array()
    grad = np.zeros_like(X)
    frames = refinement_window(motion.frame_count, t_c, half_window)
    idx = np.flatnonzero(assign_gaussians_to_joints(human) == joint)
    if frames.size == 0 or idx.size == 0:
        return 0.0, grad
    pos, jac = _joint_splat_jacobian(human, X[frames], idx)
    loss = 0.0
    for f, t in enumerate(frames):
        obj = trajectory.positions[t]
        dist, nn = cKDTree(obj).query(pos[f], k=1)
        hinge = np.maximum(0.0, d_contact - dist)
        active = np.flatnonzero(hinge > 0)
        loss += float(np.mean(hinge * hinge))
        if active.size == 0:
            continue
        diff = pos[f, active] - obj[nn[active]]
        dd = dist[active]
        direction = np.empty_like(diff)
        ok = dd > 1e-12
        direction[ok] = diff[ok] / dd[ok, None]
        # coincident splat: push away from the object's centre of mass
        away = pos[f, active[~ok]] - trajectory.com[t]
        direction[~ok] = away / np.maximum(np.linalg.norm(away, axis=1, keepdims=True), 1e-12)
        dpos = (-2.0 * hinge[active] / idx.size)[:, None] * direction
        grad[t] = np.einsum("ma,mad->d", dpos, jac[f, active])
    return loss, grad


def penetration_depth(human: SkinnedHuman, motion: MotionSequence, trajectory: ObjectTrajectory,
                      t: int, joint: int, d_contact: float = 0.01) -> float:
    """Largest ``max(0, d_contact - dist)`` over the joint's splats at frame ``t``."""
    idx = np.flatnonzero(assign_gaussians_to_joints(human) == joint)
    pos = skinned_positions(human, motion.to_array()[t:t + 1])[0, idx]
    dist, _ = cKDTree(trajectory.positions[t]).query(pos, k=1)
    return float(np.max(np.maximum(0.0, d_contact - dist)))
