"""Explicit MLS-MPM for an elastic particle object.

Quadratic B-spline transfers with APIC affine momentum, fixed-corotated
stress, gravity and wall boundaries on a cubic background grid.  All state
is float64.  The vectorised scatter is partitioned into fixed-size particle
chunks that are reduced in chunk order, so results never depend on the
worker count; ``p2g_reference`` is the plain-loop oracle for it.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .scene import MaterialParams, MpmParams, ParticleObject

log = logging.getLogger(__name__)

BOUND = 2  # wall thickness in grid nodes
MARGIN = 2.0  # minimum particle distance from the domain faces, in cells
CHUNK = 16384  # particles per scatter partition

_OFFSETS = np.stack(np.meshgrid(np.arange(3), np.arange(3), np.arange(3), indexing="ij"), -1).reshape(27, 3)


class SimulationError(RuntimeError):
    pass


class OutOfDomainError(SimulationError):
    pass


class InversionError(SimulationError):
    pass


def worker_count() -> int:
    n = int(os.environ.get("HOI_THREADS", "0") or 0)
    return n if n > 0 else (os.cpu_count() or 1)


@dataclass(frozen=True, eq=False)
class SimState:
    x: np.ndarray
    v: np.ndarray
    C: np.ndarray
    F: np.ndarray
    masses: np.ndarray
    volumes: np.ndarray
    origin: np.ndarray
    step: int = 0

    @property
    def count(self) -> int:
        return self.x.shape[0]

    def momentum(self) -> np.ndarray:
        return self.masses @ self.v

    def center_of_mass(self) -> np.ndarray:
        return self.masses @ self.x / self.masses.sum()


@dataclass(frozen=True, eq=False)
class ObjectTrajectory:
    positions: np.ndarray  # (T, N, 3)
    com: np.ndarray  # (T, 3)
    masses: np.ndarray  # (N,)
    fps: float
    # per-frame particle velocities; not persisted in trajectory files
    velocities: Optional[np.ndarray] = None
    # lower corner of the simulation domain the trajectory was produced in
    origin: Optional[np.ndarray] = None

    @property
    def frame_count(self) -> int:
        return self.positions.shape[0]

    @property
    def particle_count(self) -> int:
        return self.positions.shape[1]

    @classmethod
    def from_positions(cls, positions, masses, fps: float, velocities=None) -> "ObjectTrajectory":
        positions = np.asarray(positions, dtype=np.float64)
        masses = np.asarray(masses, dtype=np.float64)
        return cls(positions, com_of(positions, masses), masses, fps, velocities)

    def frame_velocities(self, t: int) -> np.ndarray:
        """Particle velocities at frame ``t`` (m/s), falling back to a backward difference."""
        if self.velocities is not None:
            return self.velocities[t]
        if t == 0:
            return np.zeros_like(self.positions[0])
        return (self.positions[t] - self.positions[t - 1]) * self.fps

    def com_velocity(self, t: int) -> np.ndarray:
        """Backward-difference COM velocity at frame ``t`` (m/s)."""
        if t == 0:
            return np.zeros(3)
        return (self.com[t] - self.com[t - 1]) * self.fps


def com_of(positions: np.ndarray, masses: np.ndarray) -> np.ndarray:
    return np.einsum("n,tnk->tk", masses, positions) / masses.sum()


def resolve_origin(positions: np.ndarray, params: MpmParams) -> np.ndarray:
    if params.domain_origin is not None:
        return np.asarray(params.domain_origin, dtype=np.float64)
    lo, hi = positions.min(axis=0), positions.max(axis=0)
    return 0.5 * (lo + hi) - 0.5 * params.domain_extent


def _check_domain(x: np.ndarray, origin: np.ndarray, params: MpmParams, margin: float, where: str):
    g = (x - origin) / params.dx
    n = params.grid_resolution
    bad = np.flatnonzero(np.any((g < margin) | (g > n - margin), axis=1))
    if bad.size:
        i = int(bad[0])
        raise OutOfDomainError(f"{where}: particle {i} at {x[i].tolist()} is outside the "
                               f"simulation domain (margin {margin} cells)")


def init_sim(obj: ParticleObject, params: MpmParams, velocities=None, origin=None) -> SimState:
    x = np.array(obj.positions, dtype=np.float64)
    origin = resolve_origin(x, params) if origin is None else np.asarray(origin, dtype=np.float64)
    _check_domain(x, origin, params, MARGIN, "init_sim")
    cfl = params.cfl_number(obj.material)
    if cfl >= 1.0:
        log.warning("CFL number %.3g >= 1: substep_dt %.3g is too large for cell size %.3g",
                    cfl, params.substep_dt, params.dx)
    n = x.shape[0]
    v = np.array(obj.velocities if velocities is None else np.broadcast_to(velocities, (n, 3)),
                 dtype=np.float64)
    return SimState(x, v, np.zeros((n, 3, 3)), np.tile(np.eye(3), (n, 1, 1)),
                    np.array(obj.masses, dtype=np.float64), np.array(obj.volumes, dtype=np.float64),
                    origin, 0)


def _stencil(x: np.ndarray, origin: np.ndarray, params: MpmParams):
    inv_dx = 1.0 / params.dx
    n = params.grid_resolution
    Xg = (x - origin) * inv_dx
    base = np.floor(Xg - 0.5).astype(np.int64)
    bad = np.flatnonzero(np.any((base < 0) | (base + 2 > n - 1), axis=1))
    if bad.size:
        i = int(bad[0])
        raise OutOfDomainError(f"particle {i} at {x[i].tolist()} left the simulation domain")
    fx = Xg - base
    w = np.stack([0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2], axis=-1)
    N = x.shape[0]
    weight = (w[:, 0, :, None, None] * w[:, 1, None, :, None] * w[:, 2, None, None, :]).reshape(N, 27)
    dpos = (_OFFSETS[None, :, :] - fx[:, None, :]) * params.dx
    flat_base = (base[:, 0] * n + base[:, 1]) * n + base[:, 2]
    idx = flat_base[:, None] + _NODE_STEP(n)[None, :]
    return weight, dpos, idx


def _NODE_STEP(n: int) -> np.ndarray:
    return (_OFFSETS[:, 0] * n + _OFFSETS[:, 1]) * n + _OFFSETS[:, 2]


def polar_rotation(F: np.ndarray) -> np.ndarray:
    """Rotation factor of F via SVD, sign-corrected so det(R) = +1."""
    U, _, Vt = np.linalg.svd(F)
    R = U @ Vt
    flip = np.linalg.det(R) < 0
    if np.any(flip):
        U = U.copy()
        U[flip, :, 2] *= -1.0
        R = U @ Vt
    return R


def kirchhoff_stress(F: np.ndarray, material: MaterialParams) -> np.ndarray:
    """Fixed-corotated Kirchhoff stress ``2 mu (F - R) F^T + lam (J - 1) J I``."""
    mu, lam = material.lame
    R = polar_rotation(F)
    J = np.linalg.det(F)
    tau = 2.0 * mu * (F - R) @ np.swapaxes(F, 1, 2)
    tau += (lam * (J - 1.0) * J)[:, None, None] * np.eye(3)
    return tau


def _affine(state: SimState, params: MpmParams, material: MaterialParams) -> np.ndarray:
    inv_dx = 1.0 / params.dx
    stress = (-params.substep_dt * 4.0 * inv_dx * inv_dx) * state.volumes[:, None, None] \
        * kirchhoff_stress(state.F, material)
    return stress + state.masses[:, None, None] * state.C


@dataclass(frozen=True, eq=False)
class GridScatter:
    """Result of a particle-to-grid transfer on the active (touched) nodes only."""

    active: np.ndarray  # (M,) flat node indices, ascending
    mass: np.ndarray  # (M,)
    momentum: np.ndarray  # (M, 3)
    slot: np.ndarray  # (N, 27) position of each stencil node within ``active``
    weight: np.ndarray  # (N, 27)
    dpos: np.ndarray  # (N, 27, 3)

    def dense(self, n: int):
        gm = np.zeros(n ** 3)
        gp = np.zeros((n ** 3, 3))
        gm[self.active] = self.mass
        gp[self.active] = self.momentum
        return gm, gp


def _scatter_chunk(slot, weight, contrib, masses, size):
    flat = slot.ravel()
    out = np.empty((4, size))
    out[0] = np.bincount(flat, weights=(weight * masses[:, None]).ravel(), minlength=size)
    for k in range(3):
        out[1 + k] = np.bincount(flat, weights=contrib[..., k].ravel(), minlength=size)
    return out


def p2g(state: SimState, params: MpmParams, material: MaterialParams,
        threads: Optional[int] = None) -> GridScatter:
    weight, dpos, idx = _stencil(state.x, state.origin, params)
    affine = _affine(state, params, material)
    contrib = weight[..., None] * (state.masses[:, None, None] * state.v[:, None, :]
                                   + dpos @ np.swapaxes(affine, 1, 2))
    n3 = params.grid_resolution ** 3
    touched = np.zeros(n3, dtype=bool)
    touched[idx] = True
    active = np.flatnonzero(touched)
    lookup = np.empty(n3, dtype=np.int64)
    lookup[active] = np.arange(active.size)
    slot = lookup[idx]

    N, M = state.count, active.size
    bounds = [(s, min(s + CHUNK, N)) for s in range(0, N, CHUNK)]
    parts = [(slot[a:b], weight[a:b], contrib[a:b], state.masses[a:b], M) for a, b in bounds]
    threads = worker_count() if threads is None else threads
    if len(parts) == 1 or threads <= 1:
        results = [_scatter_chunk(*p) for p in parts]
    else:
        with ThreadPoolExecutor(max_workers=min(threads, len(parts))) as ex:
            results = list(ex.map(lambda p: _scatter_chunk(*p), parts))
    total = results[0]
    for r in results[1:]:
        total = total + r
    return GridScatter(active, total[0], total[1:].T, slot, weight, dpos)


def p2g_reference(state: SimState, params: MpmParams, material: MaterialParams):
    """Per-particle, per-node loop; the oracle for :func:`p2g`."""
    n = params.grid_resolution
    inv_dx = 1.0 / params.dx
    gm = np.zeros(n ** 3)
    gp = np.zeros((n ** 3, 3))
    affine = _affine(state, params, material)
    for p in range(state.count):
        Xg = (state.x[p] - state.origin) * inv_dx
        base = [int(np.floor(c - 0.5)) for c in Xg]
        fx = Xg - np.array(base)
        w = [0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2]
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    wt = w[i][0] * w[j][1] * w[k][2]
                    dpos = (np.array([i, j, k]) - fx) * params.dx
                    node = ((base[0] + i) * n + base[1] + j) * n + base[2] + k
                    gm[node] += wt * state.masses[p]
                    gp[node] += wt * (state.masses[p] * state.v[p] + affine[p] @ dpos)
    return gm, gp


def grid_update(grid: GridScatter, params: MpmParams) -> np.ndarray:
    """Node velocities (aligned with ``grid.active``) after gravity and wall conditions."""
    gv = grid.momentum / grid.mass[:, None]
    gv += params.substep_dt * np.asarray(params.gravity, dtype=np.float64)
    if params.boundary != "none":
        n = params.grid_resolution
        ijk = np.stack(np.unravel_index(grid.active, (n, n, n)), axis=1)
        low, high = ijk < BOUND, ijk > n - 1 - BOUND
        if params.boundary == "sticky":
            gv[np.any(low | high, axis=1)] = 0.0
        else:
            gv[low & (gv < 0)] = 0.0
            gv[high & (gv > 0)] = 0.0
    return gv


def substep(state: SimState, params: MpmParams, material: MaterialParams,
            threads: Optional[int] = None) -> SimState:
    dt = params.substep_dt
    inv_dx = 1.0 / params.dx
    grid = p2g(state, params, material, threads)
    gv = grid_update(grid, params)
    wv = grid.weight[..., None] * gv[grid.slot]  # (N, 27, 3)
    v_new = wv.sum(axis=1)
    C_new = (4.0 * inv_dx * inv_dx) * (np.swapaxes(wv, 1, 2) @ grid.dpos)
    # trapezoidal advection: exact for uniform acceleration
    x_new = state.x + 0.5 * dt * (state.v + v_new)
    F_new = (np.eye(3) + dt * C_new) @ state.F
    det = np.linalg.det(F_new)
    bad = np.flatnonzero(~(det > 0))
    if bad.size:
        i = int(bad[0])
        raise InversionError(f"particle {i} inverted (det F = {det[i]:.3g}) at step {state.step + 1}")
    return replace(state, x=x_new, v=v_new, C=C_new, F=F_new, step=state.step + 1)


def _run(state: SimState, params: MpmParams, material: MaterialParams, frames: int,
         frame_offset: int = 0):
    T = frames
    pos = np.empty((T,) + state.x.shape)
    vel = np.empty((T,) + state.x.shape)
    pos[0], vel[0] = state.x, state.v
    threads = worker_count()
    for f in range(1, T):
        for s in range(params.substeps_per_frame):
            try:
                state = substep(state, params, material, threads)
            except SimulationError as exc:
                raise type(exc)(f"frame {frame_offset + f}, substep {s}: {exc}") from exc
        pos[f], vel[f] = state.x, state.v
    return pos, vel


def simulate(obj: ParticleObject, params: MpmParams, frames: int,
             initial_velocity_override=None, origin=None) -> ObjectTrajectory:
    """Free-motion trajectory; frame 0 is the initial state."""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    state = init_sim(obj, params, initial_velocity_override, origin)
    pos, vel = _run(state, params, obj.material, frames)
    traj = ObjectTrajectory.from_positions(pos, state.masses, 1.0 / params.frame_dt, vel)
    return replace(traj, origin=state.origin)


def resimulate_from(trajectory: ObjectTrajectory, obj: ParticleObject, params: MpmParams,
                    t_c: int, post_velocity, origin=None) -> ObjectTrajectory:
    """Restart at frame ``t_c`` with ``post_velocity`` added to every particle and splice.

    F and C are reset at the restart; frames ``[0, t_c]`` are copied unchanged.
    """
    T = trajectory.frame_count
    if not 0 <= t_c < T:
        raise ValueError(f"t_c={t_c} outside [0, {T})")
    x0 = trajectory.positions[t_c]
    v0 = trajectory.frame_velocities(t_c) + np.asarray(post_velocity, dtype=np.float64)
    if origin is None:
        origin = trajectory.origin
    if origin is None:
        origin = resolve_origin(trajectory.positions[0], params)
    restart = replace(obj, splats=obj.splats.with_positions(x0))
    state = init_sim(restart, params, v0, origin)
    pos, vel = _run(state, params, obj.material, T - t_c, frame_offset=t_c)
    positions = np.concatenate([trajectory.positions[:t_c + 1], pos[1:]])
    velocities = None
    if trajectory.velocities is not None:
        velocities = np.concatenate([trajectory.velocities[:t_c], v0[None], vel[1:]])
    com = np.concatenate([trajectory.com[:t_c + 1], com_of(pos[1:], trajectory.masses)])
    return ObjectTrajectory(positions, com, trajectory.masses, trajectory.fps, velocities, state.origin)
