"""Core scene data: splat clouds, the particle object, the skinned human,
motion sequences and the parameter blocks that drive a run.

Every type here is immutable after construction.  Constructors only coerce
shapes; value invariants are reported by ``validate_scene`` so that invalid
configurations can be built, inspected and rejected with a full list of
problems instead of failing on the first one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Iterator, Optional

import numpy as np

Violation = tuple[str, str]


def _frozen(a, dtype=np.float64, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Splat:
    position: tuple[float, float, float]
    radius: float
    opacity: float
    color: tuple[float, float, float]


@dataclass(frozen=True, eq=False)
class SplatCloud:
    """Struct-of-arrays splat storage. ``cloud[i]`` yields a :class:`Splat`."""

    positions: np.ndarray
    radii: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        pos = _frozen(self.positions)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"splat positions must be (N, 3), got {pos.shape}")
        n = pos.shape[0]
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "radii", _frozen(np.broadcast_to(self.radii, (n,))))
        object.__setattr__(self, "opacities", _frozen(np.broadcast_to(self.opacities, (n,))))
        object.__setattr__(self, "colors", _frozen(np.broadcast_to(self.colors, (n, 3))))

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> Splat:
        return Splat(tuple(self.positions[i]), float(self.radii[i]),
                     float(self.opacities[i]), tuple(self.colors[i]))

    def with_positions(self, positions) -> "SplatCloud":
        return SplatCloud(positions, self.radii, self.opacities, self.colors)

    def validate(self, path: str) -> Iterator[Violation]:
        if len(self) < 1:
            yield path, "at least one splat required"
        if not np.all(np.isfinite(self.positions)):
            yield f"{path}.positions", "non-finite position"
        bad = np.flatnonzero(~(self.radii > 0))
        if bad.size:
            yield f"{path}.radii", f"radius must be > 0 (splat {int(bad[0])})"
        bad = np.flatnonzero((self.opacities < 0) | (self.opacities > 1))
        if bad.size:
            yield f"{path}.opacities", f"opacity outside [0, 1] (splat {int(bad[0])})"
        bad = np.flatnonzero(np.any((self.colors < 0) | (self.colors > 1), axis=1))
        if bad.size:
            yield f"{path}.colors", f"color channel outside [0, 1] (splat {int(bad[0])})"

    def __eq__(self, other):
        if not isinstance(other, SplatCloud):
            return NotImplemented
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name))
                   for f in fields(self))


@dataclass(frozen=True)
class MaterialParams:
    youngs_modulus: float = 1e7
    poisson_ratio: float = 0.45
    # not given by the source scenes; unvalidated default
    density: float = 1000.0
    restitution: float = 0.6

    @property
    def lame(self) -> tuple[float, float]:
        E, nu = self.youngs_modulus, self.poisson_ratio
        mu = E / (2.0 * (1.0 + nu))
        lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
        return mu, lam

    def sound_speed(self) -> float:
        mu, lam = self.lame
        return math.sqrt((lam + 2.0 * mu) / self.density)

    def validate(self, path: str) -> Iterator[Violation]:
        if not self.youngs_modulus > 0:
            yield f"{path}.youngs_modulus", "must be > 0"
        if not 0.0 < self.poisson_ratio < 0.5:
            yield f"{path}.poisson_ratio", "must lie in (0, 0.5)"
        if not self.density > 0:
            yield f"{path}.density", "must be > 0"
        if not 0.0 <= self.restitution <= 1.0:
            yield f"{path}.restitution", "must lie in [0, 1]"


@dataclass(frozen=True, eq=False)
class ParticleObject:
    splats: SplatCloud
    velocities: np.ndarray
    masses: np.ndarray
    volumes: np.ndarray
    deformation_gradients: np.ndarray
    material: MaterialParams = MaterialParams()

    def __post_init__(self):
        n = len(self.splats)
        object.__setattr__(self, "velocities", _frozen(np.broadcast_to(self.velocities, (n, 3))))
        object.__setattr__(self, "masses", _frozen(np.broadcast_to(self.masses, (n,))))
        object.__setattr__(self, "volumes", _frozen(np.broadcast_to(self.volumes, (n,))))
        object.__setattr__(self, "deformation_gradients",
                           _frozen(np.broadcast_to(self.deformation_gradients, (n, 3, 3))))

    @classmethod
    def from_points(cls, positions, *, particle_volume: float, material: MaterialParams = MaterialParams(),
                    velocity=(0.0, 0.0, 0.0), radius: float = 0.01, opacity: float = 1.0,
                    color=(0.2, 0.4, 0.9)) -> "ParticleObject":
        positions = np.asarray(positions, dtype=np.float64)
        n = positions.shape[0]
        if np.ndim(color) == 2:
            colors = np.asarray(color, dtype=np.float64)
        else:
            colors = np.tile(np.asarray(color, dtype=np.float64), (n, 1))
        splats = SplatCloud(positions, np.full(n, radius), np.full(n, opacity), colors)
        return cls(splats, np.broadcast_to(np.asarray(velocity, float), (n, 3)),
                   np.full(n, material.density * particle_volume), np.full(n, particle_volume),
                   np.broadcast_to(np.eye(3), (n, 3, 3)), material)

    @property
    def positions(self) -> np.ndarray:
        return self.splats.positions

    @property
    def count(self) -> int:
        return len(self.splats)

    def center_of_mass(self) -> np.ndarray:
        return self.masses @ self.positions / self.masses.sum()

    def with_velocity(self, velocity) -> "ParticleObject":
        return replace(self, velocities=np.broadcast_to(np.asarray(velocity, float), (self.count, 3)))

    def translated(self, offset) -> "ParticleObject":
        return replace(self, splats=self.splats.with_positions(self.positions + np.asarray(offset, float)))

    def validate(self, path: str) -> Iterator[Violation]:
        yield from self.splats.validate(f"{path}.splats")
        if not np.all(self.masses > 0):
            yield f"{path}.masses", "masses must be > 0"
        if not np.all(self.volumes > 0):
            yield f"{path}.volumes", "volumes must be > 0"
        if not np.allclose(self.deformation_gradients, np.eye(3), rtol=0, atol=0):
            yield f"{path}.deformation_gradients", "must be identity at construction"
        if not np.all(np.isfinite(self.velocities)):
            yield f"{path}.velocities", "non-finite velocity"
        yield from self.material.validate(f"{path}.material")


@dataclass(frozen=True, eq=False)
class Skeleton:
    parent: np.ndarray
    rest_offsets: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        par = _frozen(self.parent, dtype=np.int64)
        object.__setattr__(self, "parent", par)
        object.__setattr__(self, "rest_offsets", _frozen(self.rest_offsets, shape=(par.shape[0], 3)))
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def joint_count(self) -> int:
        return int(self.parent.shape[0])

    def chain(self, joint: int) -> list[int]:
        """Joints from the root down to ``joint`` inclusive."""
        out = []
        j = int(joint)
        while j >= 0:
            out.append(j)
            j = int(self.parent[j])
        return out[::-1]

    def rest_positions(self) -> np.ndarray:
        pos = np.zeros((self.joint_count, 3))
        for j in range(self.joint_count):
            p = self.parent[j]
            pos[j] = self.rest_offsets[j] + (pos[p] if p >= 0 else 0.0)
        return pos

    def validate(self, path: str) -> Iterator[Violation]:
        J = self.joint_count
        if J < 1:
            yield f"{path}.joint_count", "must be >= 1"
            return
        if self.parent[0] != -1:
            yield f"{path}.parent", "joint 0 must be the root (parent -1)"
        for j in range(1, J):
            if not 0 <= self.parent[j] < j:
                yield f"{path}.parent", f"joint {j} has parent {int(self.parent[j])}; must be in [0, {j})"
        if self.names and len(self.names) != J:
            yield f"{path}.names", "name count differs from joint count"
        if not np.all(np.isfinite(self.rest_offsets)):
            yield f"{path}.rest_offsets", "non-finite offset"

    def __eq__(self, other):
        if not isinstance(other, Skeleton):
            return NotImplemented
        return (np.array_equal(self.parent, other.parent)
                and np.array_equal(self.rest_offsets, other.rest_offsets)
                and self.names == other.names)


@dataclass(frozen=True, eq=False)
class SkinnedHuman:
    skeleton: Skeleton
    canonical_splats: SplatCloud
    skinning_weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "skinning_weights",
                           _frozen(self.skinning_weights,
                                   shape=(len(self.canonical_splats), self.skeleton.joint_count)))

    def validate(self, path: str) -> Iterator[Violation]:
        yield from self.skeleton.validate(f"{path}.skeleton")
        yield from self.canonical_splats.validate(f"{path}.canonical_splats")
        w = self.skinning_weights
        for i in np.flatnonzero(np.any(w < 0, axis=1)):
            yield f"{path}.skinning_weights", f"splat {int(i)} has a negative weight"
        for i in np.flatnonzero(np.abs(w.sum(axis=1) - 1.0) > 1e-6):
            yield f"{path}.skinning_weights", f"splat {int(i)} weights sum to {w[i].sum():.6g}, not 1"

    def __eq__(self, other):
        if not isinstance(other, SkinnedHuman):
            return NotImplemented
        return (self.skeleton == other.skeleton and self.canonical_splats == other.canonical_splats
                and np.array_equal(self.skinning_weights, other.skinning_weights))


IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


@dataclass(frozen=True, eq=False)
class MotionSequence:
    """Per-frame root translation, 6D global orientation and per-joint
    axis-angle rotations.  Flattened frame layout is ``[r | omega | theta]``."""

    root_translation: np.ndarray
    global_orientation: np.ndarray
    joint_poses: np.ndarray
    fps: float = 20.0

    def __post_init__(self):
        r = _frozen(self.root_translation)
        T = r.shape[0]
        object.__setattr__(self, "root_translation", r.reshape(T, 3))
        object.__setattr__(self, "global_orientation", _frozen(self.global_orientation, shape=(T, 6)))
        theta = _frozen(self.joint_poses)
        object.__setattr__(self, "joint_poses", theta.reshape(T, -1, 3))

    @property
    def frame_count(self) -> int:
        return int(self.root_translation.shape[0])

    @property
    def joint_count(self) -> int:
        return int(self.joint_poses.shape[1])

    @property
    def frame_dim(self) -> int:
        return 3 + 6 + 3 * self.joint_count

    @classmethod
    def rest(cls, frames: int, joints: int, fps: float = 20.0) -> "MotionSequence":
        return cls(np.zeros((frames, 3)), np.tile(IDENTITY_6D, (frames, 1)),
                   np.zeros((frames, joints, 3)), fps)

    def to_array(self) -> np.ndarray:
        T = self.frame_count
        return np.concatenate([self.root_translation, self.global_orientation,
                               self.joint_poses.reshape(T, -1)], axis=1)

    @classmethod
    def from_array(cls, X, joints: int, fps: float = 20.0) -> "MotionSequence":
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != 9 + 3 * joints:
            raise ValueError(f"motion array must be (T, {9 + 3 * joints}), got {X.shape}")
        return cls(X[:, :3], X[:, 3:9], X[:, 9:].reshape(X.shape[0], joints, 3), fps)

    def validate(self, path: str, joints: Optional[int] = None) -> Iterator[Violation]:
        if self.frame_count < 1:
            yield f"{path}.frame_count", "must be >= 1"
        if not self.fps > 0:
            yield f"{path}.fps", "must be > 0"
        if joints is not None and self.joint_count != joints:
            yield f"{path}.joint_poses", f"has {self.joint_count} joints, skeleton has {joints}"
        if not np.all(np.isfinite(self.to_array())):
            yield path, "non-finite motion parameter"

    def __eq__(self, other):
        if not isinstance(other, MotionSequence):
            return NotImplemented
        return self.fps == other.fps and np.array_equal(self.to_array(), other.to_array())


@dataclass(frozen=True)
class ContactParams:
    tau_contact: float = 0.05
    d_contact: float = 0.01
    enabled: bool = True
    # "com": object velocity from the centre of mass; "contact": mean of contacting particles
    object_velocity: str = "com"

    def validate(self, path: str) -> Iterator[Violation]:
        if not 0.0 < self.tau_contact <= 1.0:
            yield f"{path}.tau_contact", "must lie in (0, 1]"
        if not self.d_contact > 0:
            yield f"{path}.d_contact", "must be > 0"
        if self.object_velocity not in ("com", "contact"):
            yield f"{path}.object_velocity", "must be 'com' or 'contact'"


@dataclass(frozen=True)
class OptimizationParams:
    n_init: int = 100
    n_sync: int = 200
    n_refine: int = 3000
    lambda_hmsd: float = 10.0
    lambda_attr: float = 1.0
    sigma_window: float = 2.0
    refine_half_window: int = 1
    lr_stage12: float = 0.005
    lr_stage3: float = 0.001
    hmsd_t_min: int = 0
    hmsd_t_max: int = 100
    hmsd_samples: int = 1
    schedule_steps: int = 1000
    guidance_scale: float = 7.5
    freeze_orientation: bool = False
    stage3_prior: bool = True
    seed: int = 0

    def validate(self, path: str) -> Iterator[Violation]:
        for name in ("n_init", "n_sync", "n_refine", "refine_half_window"):
            if getattr(self, name) < 0:
                yield f"{path}.{name}", "must be >= 0"
        if not 0 <= self.hmsd_t_min <= self.hmsd_t_max < self.schedule_steps:
            yield f"{path}.hmsd_t_max", "need 0 <= hmsd_t_min <= hmsd_t_max < schedule_steps"
        if self.hmsd_samples < 1:
            yield f"{path}.hmsd_samples", "must be >= 1"
        if not self.sigma_window > 0:
            yield f"{path}.sigma_window", "must be > 0"
        for name in ("lr_stage12", "lr_stage3"):
            if not getattr(self, name) > 0:
                yield f"{path}.{name}", "must be > 0"
        for name in ("lambda_hmsd", "lambda_attr"):
            if getattr(self, name) < 0:
                yield f"{path}.{name}", "must be >= 0"


@dataclass(frozen=True)
class MpmParams:
    grid_resolution: int = 64
    # not given by the source scenes; unvalidated default
    domain_extent: float = 2.0
    # lower corner of the cubic domain; None centres the domain on the object
    domain_origin: Optional[tuple[float, float, float]] = None
    substep_dt: float = 4e-5
    substeps_per_frame: int = 1250
    gravity: tuple[float, float, float] = (0.0, -9.8, 0.0)
    boundary: str = "sticky"

    @property
    def dx(self) -> float:
        return self.domain_extent / self.grid_resolution

    @property
    def frame_dt(self) -> float:
        return self.substep_dt * self.substeps_per_frame

    def validate(self, path: str) -> Iterator[Violation]:
        if self.grid_resolution < 8:
            yield f"{path}.grid_resolution", "must be >= 8"
        if not self.domain_extent > 0:
            yield f"{path}.domain_extent", "must be > 0"
        if not self.substep_dt > 0:
            yield f"{path}.substep_dt", "must be > 0"
        if self.substeps_per_frame < 1:
            yield f"{path}.substeps_per_frame", "must be >= 1"
        if self.boundary not in ("sticky", "slip", "none"):
            yield f"{path}.boundary", "must be one of sticky, slip, none"

    def cfl_number(self, material: MaterialParams) -> float:
        return self.substep_dt * material.sound_speed() / self.dx


@dataclass(frozen=True)
class DenoiserSpec:
    kind: str = "projection"
    # projection target: "builtin:kick" or a motion file path
    reference: str = "builtin:kick"
    width: int = 5
    command: tuple[str, ...] = ()

    def validate(self, path: str) -> Iterator[Violation]:
        if self.kind not in ("projection", "smoothing", "identity", "external"):
            yield f"{path}.kind", "must be one of projection, smoothing, identity, external"
        if self.kind == "smoothing" and self.width < 1:
            yield f"{path}.width", "must be >= 1"
        if self.kind == "external" and not self.command:
            yield f"{path}.command", "external denoiser needs a command"


@dataclass(frozen=True, eq=False)
class SceneConfig:
    human: SkinnedHuman
    object: ParticleObject
    object_initial_velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    mpm: MpmParams = MpmParams()
    optimization: OptimizationParams = OptimizationParams()
    contact: ContactParams = ContactParams()
    denoiser: DenoiserSpec = DenoiserSpec()
    motion_prompt: str = "a person kicks a ball"
    frames: int = 40
    fps: float = 20.0
    # raw source description, echoed into run reports
    sources: dict = field(default_factory=dict)

    @property
    def gravity(self) -> tuple[float, float, float]:
        return self.mpm.gravity

    def replace(self, **kw) -> "SceneConfig":
        return replace(self, **kw)


def validate_scene(config: SceneConfig) -> list[str]:
    """Every invariant violation as ``"field.path: message"``, sorted by path."""
    found: list[Violation] = []
    found += config.human.validate("human")
    found += config.object.validate("object")
    found += config.mpm.validate("mpm")
    found += config.optimization.validate("optimization")
    found += config.contact.validate("contact")
    found += config.denoiser.validate("denoiser")
    if config.frames < 2:
        found.append(("frames", "must be >= 2"))
    if not config.fps > 0:
        found.append(("fps", "must be > 0"))
    elif config.mpm.frame_dt > 0 and abs(config.fps * config.mpm.frame_dt - 1.0) > 1e-9:
        # motion frames and simulation frames are compared index by index
        found.append(("fps", f"must equal 1 / (substep_dt * substeps_per_frame) = {1.0 / config.mpm.frame_dt:.6g}"))
    if not np.all(np.isfinite(config.object_initial_velocity)):
        found.append(("object_initial_velocity", "non-finite"))
    found.sort(key=lambda v: v[0])
    return [f"{p}: {m}" for p, m in found]


# ---------------------------------------------------------------------------
# Built-in assets

SMPL_JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck",
    "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hand", "right_hand",
)
SMPL_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)
LEFT_FOOT = 10

# y up, facing +z, body-left is +x
_TOY_OFFSETS = (
    (0.0, 0.93, 0.0), (0.09, -0.08, 0.0), (-0.09, -0.08, 0.0), (0.0, 0.11, 0.0),
    (0.01, -0.38, 0.0), (-0.01, -0.38, 0.0), (0.0, 0.13, 0.0), (0.0, -0.40, -0.02),
    (0.0, -0.40, -0.02), (0.0, 0.05, 0.01), (0.0, -0.05, 0.12), (0.0, -0.05, 0.12),
    (0.0, 0.21, -0.02), (0.07, 0.12, 0.0), (-0.07, 0.12, 0.0), (0.0, 0.09, 0.05),
    (0.11, 0.04, 0.0), (-0.11, 0.04, 0.0), (0.26, 0.0, 0.0), (-0.26, 0.0, 0.0),
    (0.25, 0.0, 0.0), (-0.25, 0.0, 0.0), (0.08, 0.0, 0.0), (-0.08, 0.0, 0.0),
)
_TORSO = {3, 6, 9, 12}


def builtin_skeleton() -> Skeleton:
    return Skeleton(np.array(SMPL_PARENTS), np.array(_TOY_OFFSETS), SMPL_JOINT_NAMES)


def builtin_toy_humanoid() -> SkinnedHuman:
    """Deterministic 24-joint humanoid: capsule shells around every bone and a
    sphere for the head, each splat skinned rigidly to its nearest joint."""
    skel = builtin_skeleton()
    joints = skel.rest_positions()
    pts = []
    around = 8
    phis = 2.0 * np.pi * np.arange(around) / around
    for j in range(1, skel.joint_count):
        a, b = joints[skel.parent[j]], joints[j]
        axis = b - a
        length = np.linalg.norm(axis)
        d = axis / length
        helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
        u = np.cross(d, helper)
        u /= np.linalg.norm(u)
        v = np.cross(d, u)
        rad = 0.11 if j in _TORSO else 0.045
        for s in (np.arange(6) + 0.5) / 6.0:
            c = a + s * axis
            for phi in phis:
                pts.append(c + rad * (np.cos(phi) * u + np.sin(phi) * v))
    head = joints[15] + np.array([0.0, 0.08, 0.0])
    # Fibonacci sphere
    k = np.arange(60) + 0.5
    polar = np.arccos(1.0 - 2.0 * k / 60)
    azim = np.pi * (1.0 + 5.0 ** 0.5) * k
    sphere = np.stack([np.cos(azim) * np.sin(polar), np.cos(polar), np.sin(azim) * np.sin(polar)], axis=1)
    pts.extend(head + 0.1 * sphere)
    pts = np.asarray(pts)

    nearest = np.argmin(np.linalg.norm(pts[:, None, :] - joints[None, :, :], axis=2), axis=1)
    weights = np.zeros((len(pts), skel.joint_count))
    weights[np.arange(len(pts)), nearest] = 1.0
    colors = np.tile([0.85, 0.65, 0.5], (len(pts), 1))
    colors[np.isin(nearest, [LEFT_FOOT, 7])] = (0.8, 0.2, 0.2)
    cloud = SplatCloud(pts, np.full(len(pts), 0.025), np.full(len(pts), 0.9), colors)
    return SkinnedHuman(skel, cloud, weights)


def lattice_ball(center, radius: float, spacing: float) -> np.ndarray:
    """Cubic-lattice points inside a sphere, in lexicographic order."""
    n = int(np.floor(radius / spacing))
    ax = spacing * np.arange(-n, n + 1)
    g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    g = g[np.linalg.norm(g, axis=1) <= radius + 1e-12]
    return g + np.asarray(center, dtype=np.float64)


def builtin_ball(center=(0.0, 0.3, 0.5), radius: float = 0.12, spacing: float = 0.025,
                 material: MaterialParams = MaterialParams(),
                 color=(0.15, 0.35, 0.9)) -> ParticleObject:
    pts = lattice_ball(center, radius, spacing)
    return ParticleObject.from_points(pts, particle_volume=spacing ** 3, material=material,
                                      radius=0.6 * spacing, color=color)


def default_scene() -> SceneConfig:
    return SceneConfig(builtin_toy_humanoid(), builtin_ball(),
                       sources={"human": "builtin:toy24", "object": "builtin:ball"})
