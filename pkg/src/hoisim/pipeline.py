"""Three-stage motion optimisation coupled to the object simulation.

1. score distillation alone from a rest pose;
2. distillation plus windowed attraction toward the object, then contact
   detection and re-simulation of the object from the contact frame;
3. penetration refinement restricted to frames around the contact.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import mpm
from .clips import synthetic_kick
from .distill import (Denoiser, ExternalDenoiser, IdentityDenoiser, NoiseSchedule, ProjectionDenoiser,
                      SmoothingDenoiser, hmsd_gradient)
from .interaction import ContactEvent, attraction_loss, detect_contact, masked_refinement_loss
from .kinematics import VelocityProfile, select_contact_joint_and_frame, velocity_profile
from .scene import MotionSequence, SceneConfig

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, message: str, partial: "RunReport"):
        super().__init__(message)
        self.partial = partial


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), 0)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, where: str = ""):
    """Bias-corrected Adam update; returns new ``(params, state)`` without mutating inputs."""
    if params.shape != grad.shape:
        raise ValueError(f"gradient shape {grad.shape} differs from parameters {params.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(f"non-finite gradient {where}".strip())
    k = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** k)
    v_hat = v / (1.0 - beta2 ** k)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, k)


def make_schedule(config: SceneConfig) -> NoiseSchedule:
    return NoiseSchedule.linear(config.optimization.schedule_steps)


def make_denoiser(config: SceneConfig, schedule: Optional[NoiseSchedule] = None) -> Denoiser:
    spec = config.denoiser
    schedule = schedule or make_schedule(config)
    J = config.human.skeleton.joint_count
    if spec.kind == "projection":
        if spec.reference == "builtin:kick":
            ref = synthetic_kick(config.frames, config.fps, joints=J)
        else:
            from .io import load_motion
            ref = load_motion(spec.reference, joints=J)
        if ref.frame_count != config.frames:
            raise ValueError(f"reference motion has {ref.frame_count} frames, scene has {config.frames}")
        return ProjectionDenoiser(ref.to_array())
    if spec.kind == "smoothing":
        return SmoothingDenoiser(schedule, spec.width)
    if spec.kind == "identity":
        return IdentityDenoiser(schedule)
    return ExternalDenoiser(spec.command, J, config.motion_prompt, config.optimization.guidance_scale)


def _hmsd(config, X, denoiser, schedule, rng):
    opt = config.optimization
    return hmsd_gradient(X, denoiser, schedule, opt.hmsd_t_min, opt.hmsd_t_max, config.motion_prompt,
                         opt.hmsd_samples, rng, return_loss=True)


def _mask(config, grad):
    if config.optimization.freeze_orientation:
        grad[:, 3:9] = 0.0
    return grad


def stage1_init_motion(config: SceneConfig, denoiser: Denoiser, rng: np.random.Generator,
                       schedule: Optional[NoiseSchedule] = None):
    """``n_init`` Adam steps of distillation alone from a rest pose; returns ``(motion, losses)``."""
    schedule = schedule or make_schedule(config)
    opt = config.optimization
    J = config.human.skeleton.joint_count
    X = MotionSequence.rest(config.frames, J, config.fps).to_array()
    state = AdamState.zeros_like(X)
    losses = []
    for it in range(opt.n_init):
        loss, g = _hmsd(config, X, denoiser, schedule, rng)
        X, state = adam_step(X, _mask(config, g), state, opt.lr_stage12, where=f"in stage 1, iteration {it}")
        losses.append(loss)
    return MotionSequence.from_array(X, J, config.fps), losses


@dataclass
class Stage2Result:
    motion: MotionSequence
    event: Optional[ContactEvent]
    trajectory: mpm.ObjectTrajectory
    losses: list
    selection: tuple[int, int]
    profile: VelocityProfile


def stage2_coordinate(config: SceneConfig, motion: MotionSequence, denoiser: Denoiser,
                      free_trajectory: mpm.ObjectTrajectory, rng: np.random.Generator,
                      schedule: Optional[NoiseSchedule] = None) -> Stage2Result:
    schedule = schedule or make_schedule(config)
    opt = config.optimization
    skel = config.human.skeleton
    profile = velocity_profile(skel, motion)
    j_star, t_star = select_contact_joint_and_frame(profile)
    X = motion.to_array()
    state = AdamState.zeros_like(X)
    losses = []
    for it in range(opt.n_sync):
        current = MotionSequence.from_array(X, skel.joint_count, config.fps)
        l_h, g_h = _hmsd(config, X, denoiser, schedule, rng)
        l_a, g_a = attraction_loss(current, skel, free_trajectory, j_star, t_star, opt.sigma_window)
        g = opt.lambda_hmsd * g_h + opt.lambda_attr * g_a
        X, state = adam_step(X, _mask(config, g), state, opt.lr_stage12, where=f"in stage 2, iteration {it}")
        losses.append(opt.lambda_hmsd * l_h + opt.lambda_attr * l_a)
    motion = MotionSequence.from_array(X, skel.joint_count, config.fps)

    event = None
    trajectory = free_trajectory
    if config.contact.enabled:
        event = detect_contact(config.human, motion, free_trajectory, config.contact,
                               config.object.material.restitution)
        if event is not None:
            log.info("contact at frame %d, joint %d, post velocity %s", event.frame, event.joint,
                     np.round(event.post_velocity, 4).tolist())
            trajectory = mpm.resimulate_from(free_trajectory, config.object, config.mpm, event.frame,
                                             event.post_velocity_delta)
    return Stage2Result(motion, event, trajectory, losses, (j_star, t_star), profile)


def stage3_refine(config: SceneConfig, motion: MotionSequence, trajectory: mpm.ObjectTrajectory,
                  event: Optional[ContactEvent], denoiser: Optional[Denoiser], rng: np.random.Generator,
                  schedule: Optional[NoiseSchedule] = None):
    """``n_refine`` Adam steps on the masked penetration penalty (plus the
    weighted distillation prior when enabled); the object stays fixed."""
    if event is None:
        return motion, []
    schedule = schedule or make_schedule(config)
    opt = config.optimization
    human = config.human
    J = human.skeleton.joint_count
    X = motion.to_array()
    state = AdamState.zeros_like(X)
    prior = opt.stage3_prior and opt.lambda_hmsd > 0 and denoiser is not None
    losses = []
    for it in range(opt.n_refine):
        current = MotionSequence.from_array(X, J, config.fps)
        loss, g = masked_refinement_loss(human, current, trajectory, event.frame, opt.refine_half_window,
                                         event.joint, config.contact.d_contact)
        if prior:
            l_h, g_h = _hmsd(config, X, denoiser, schedule, rng)
            g = g + opt.lambda_hmsd * g_h
            loss += opt.lambda_hmsd * l_h
        X, state = adam_step(X, _mask(config, g), state, opt.lr_stage3, where=f"in stage 3, iteration {it}")
        losses.append(loss)
    return MotionSequence.from_array(X, J, config.fps), losses


@dataclass
class RunReport:
    seed: int
    config: dict
    selection: Optional[tuple[int, int]] = None
    losses: dict = field(default_factory=lambda: {"stage1": [], "stage2": [], "stage3": []})
    event: Optional[ContactEvent] = None
    motion: Optional[MotionSequence] = None
    trajectory: Optional[mpm.ObjectTrajectory] = None
    free_trajectory: Optional[mpm.ObjectTrajectory] = None
    profile: Optional[VelocityProfile] = None
    wall_clock: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    completed: bool = False

    @property
    def contact(self) -> bool:
        return self.event is not None

    def to_dict(self) -> dict:
        """Deterministic report content; wall-clock timings are kept out."""
        return {
            "format": "hoisim-report",
            "version": 1,
            "completed": self.completed,
            "seed": self.seed,
            "selection": None if self.selection is None else
            {"joint": self.selection[0], "frame": self.selection[1]},
            "contact": self.event.to_dict() if self.event is not None else {"detected": False},
            "losses": {k: [float(x) for x in v] for k, v in self.losses.items()},
            "notes": list(self.notes),
            "config": self.config,
        }


def run_pipeline(config: SceneConfig, denoiser: Optional[Denoiser] = None,
                 free_trajectory: Optional[mpm.ObjectTrajectory] = None) -> RunReport:
    """Free simulation, then stages 1-3.  Any failure raises :class:`PipelineError`
    carrying the partial report.  A precomputed ``free_trajectory`` skips the
    first simulation."""
    from .io import config_to_dict

    opt = config.optimization
    report = RunReport(opt.seed, config_to_dict(config))
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(opt.seed).spawn(3)]
    schedule = make_schedule(config)
    own_denoiser = denoiser is None
    stage = "setup"
    try:
        if own_denoiser:
            denoiser = make_denoiser(config, schedule)
        t0 = time.perf_counter()
        stage = "simulate"
        if free_trajectory is None:
            obj = config.object.with_velocity(config.object_initial_velocity)
            free = mpm.simulate(obj, config.mpm, config.frames)
        else:
            if free_trajectory.frame_count != config.frames:
                raise ValueError(f"trajectory has {free_trajectory.frame_count} frames, scene has {config.frames}")
            free = free_trajectory
        report.free_trajectory = report.trajectory = free
        report.wall_clock["simulate"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        stage = "stage1"
        motion, report.losses["stage1"] = stage1_init_motion(config, denoiser, rngs[0], schedule)
        report.motion = motion
        report.wall_clock["stage1"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        stage = "stage2"
        s2 = stage2_coordinate(config, motion, denoiser, free, rngs[1], schedule)
        report.selection, report.profile = s2.selection, s2.profile
        report.losses["stage2"], report.motion, report.event = s2.losses, s2.motion, s2.event
        report.trajectory = s2.trajectory
        if not config.contact.enabled:
            report.notes.append("contact detection disabled: object follows free motion")
        elif s2.event is None:
            report.notes.append("no contact detected: object follows free motion")
        report.wall_clock["stage2"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        stage = "stage3"
        if s2.event is None:
            report.notes.append("stage 3 skipped: no contact event")
        report.motion, report.losses["stage3"] = stage3_refine(config, s2.motion, s2.trajectory, s2.event,
                                                               denoiser, rngs[2], schedule)
        report.wall_clock["stage3"] = time.perf_counter() - t0
        report.completed = True
    except Exception as exc:
        report.notes.append(f"aborted in {stage}: {exc}")
        raise PipelineError(f"pipeline failed in {stage}: {exc}", report) from exc
    finally:
        if own_denoiser and isinstance(denoiser, ExternalDenoiser):
            denoiser.close()
    return report
