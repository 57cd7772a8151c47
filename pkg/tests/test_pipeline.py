import numpy as np
import pytest

from conftest import fixture_config
from hoisim import io
from hoisim.distill import IdentityDenoiser, NoiseSchedule, ProjectionDenoiser
from hoisim.interaction import ContactEvent, assign_gaussians_to_joints, penetration_depth, skinned_positions
from hoisim.mpm import ObjectTrajectory
from hoisim.pipeline import (AdamState, NonFiniteGradientError, PipelineError, adam_step, make_denoiser,
                             run_pipeline, stage1_init_motion, stage3_refine)
from hoisim.scene import MotionSequence

config = fixture_config


def static_far(cfg, offset=(5.0, 5.0, 5.0)):
    pos = cfg.object.positions + np.asarray(offset)
    return ObjectTrajectory.from_positions(np.repeat(pos[None], cfg.frames, 0), cfg.object.masses, cfg.fps)


class NanDenoiser:
    def predict_clean(self, x_t, t, prompt):
        return np.full_like(x_t, np.nan)


# ---------------------------------------------------------------- adam

def test_adam_zero_gradient_keeps_parameters():
    x = np.arange(6.0).reshape(2, 3)
    y, st = adam_step(x, np.zeros_like(x), AdamState.zeros_like(x), 0.1)
    assert np.array_equal(x, y) and st.step == 1


def test_adam_constant_gradient_moves_lr_per_step():
    x = np.zeros(3)
    g = np.array([2.0, -0.5, 1e-3])
    st = AdamState.zeros_like(x)
    for _ in range(10):
        x, st = adam_step(x, g, st, 0.01)
    assert np.allclose(x, -10 * 0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_errors():
    x = np.zeros(3)
    with pytest.raises(ValueError):
        adam_step(x, np.zeros(4), AdamState.zeros_like(x), 0.1)
    with pytest.raises(NonFiniteGradientError, match="in stage 2, iteration 7"):
        adam_step(x, np.array([0.0, np.inf, 0.0]), AdamState.zeros_like(x), 0.1, where="in stage 2, iteration 7")


# ---------------------------------------------------------------- stage 1

def test_stage1_without_steps_is_rest_pose():
    cfg = config(optimization={"n_init": 0})
    motion, losses = stage1_init_motion(cfg, make_denoiser(cfg), np.random.default_rng(0))
    assert losses == []
    assert np.array_equal(motion.to_array(), MotionSequence.rest(40, 24).to_array())


def test_stage1_contracts_toward_projection_reference():
    cfg = config(optimization={"n_init": 100})
    den = make_denoiser(cfg)
    rest = MotionSequence.rest(40, 24).to_array()
    motion, losses = stage1_init_motion(cfg, den, np.random.default_rng(0))
    before = np.linalg.norm(rest - den.reference)
    after = np.linalg.norm(motion.to_array() - den.reference)
    assert after <= 0.05 * before
    assert losses[-1] < losses[0]


def test_stage1_identity_denoiser_has_no_systematic_drift():
    cfg = config(optimization={"n_init": 100})
    sched = NoiseSchedule.linear(1000)
    rest = MotionSequence.rest(40, 24).to_array()
    motion, _ = stage1_init_motion(cfg, IdentityDenoiser(sched), np.random.default_rng(0), sched)
    # Adam turns zero-mean noise into a random walk of about lr per entry and
    # step; what must vanish is the systematic part
    drift = motion.to_array() - rest
    assert abs(drift.mean()) < 1e-2


def test_stage1_frozen_orientation():
    cfg = config(optimization={"n_init": 5, "freeze_orientation": True})
    motion, _ = stage1_init_motion(cfg, make_denoiser(cfg), np.random.default_rng(0))
    rest = MotionSequence.rest(40, 24).to_array()
    assert np.array_equal(motion.to_array()[:, 3:9], rest[:, 3:9])


def test_nonfinite_gradient_names_stage_and_iteration():
    cfg = config(optimization={"n_init": 3})
    with pytest.raises(NonFiniteGradientError, match="in stage 1, iteration 0"):
        stage1_init_motion(cfg, NanDenoiser(), np.random.default_rng(0))


def test_make_denoiser_rejects_wrong_reference_length(tmp_path):
    cfg = config()
    path = io.export_motion(tmp_path / "m.toml", MotionSequence.rest(10, 24))
    bad = config(denoiser={"reference": str(path)})
    with pytest.raises(ValueError, match="10 frames"):
        make_denoiser(bad)
    assert isinstance(make_denoiser(cfg), ProjectionDenoiser)


# ---------------------------------------------------------------- stage 3

def _penetration_setup(cfg, motion, t_c=20, joint=10):
    idx = np.flatnonzero(assign_gaussians_to_joints(cfg.human) == joint)
    sp = skinned_positions(cfg.human, motion.to_array())[t_c, idx[0]]
    pts = sp + 0.03 * np.arange(4)[:, None] * np.array([0.0, 0.0, 1.0])
    traj = ObjectTrajectory.from_positions(np.repeat(pts[None], cfg.frames, 0), np.ones(4), cfg.fps)
    ev = ContactEvent(t_c, joint, np.array([0, 0, 1.0]), np.array([0, 0, 1.0]), np.zeros(3),
                      np.array([0, 0, 1.6]), 0.6, 0.1)
    return traj, ev


def test_stage3_removes_penetration_locally(kick):
    cfg = config(optimization={"n_refine": 100, "lambda_hmsd": 0.0})
    traj, ev = _penetration_setup(cfg, kick)
    assert penetration_depth(cfg.human, kick, traj, 20, 10) == pytest.approx(0.01)
    refined, losses = stage3_refine(cfg, kick, traj, ev, None, np.random.default_rng(0))
    assert penetration_depth(cfg.human, refined, traj, 20, 10) < 1e-3
    changed = np.flatnonzero(np.any(refined.to_array() != kick.to_array(), axis=1))
    assert set(changed) <= {19, 20, 21}
    assert len(losses) == 100


def test_stage3_without_event_is_identity(kick):
    cfg = config()
    m, losses = stage3_refine(cfg, kick, static_far(cfg), None, None, np.random.default_rng(0))
    assert m is kick and losses == []


# ---------------------------------------------------------------- whole pipeline, no simulation

def test_pipeline_far_object_reports_no_contact():
    cfg = config(optimization={"n_init": 5, "n_sync": 5, "n_refine": 5})
    free = static_far(cfg)
    rep = run_pipeline(cfg, free_trajectory=free)
    assert rep.completed and not rep.contact
    assert rep.trajectory is free
    d = rep.to_dict()
    assert d["contact"] == {"detected": False}
    assert "no contact detected: object follows free motion" in d["notes"]
    assert "stage 3 skipped: no contact event" in d["notes"]
    assert [len(d["losses"][k]) for k in ("stage1", "stage2", "stage3")] == [5, 5, 0]
    assert d["selection"]["joint"] == 10
    assert "simulate" in rep.wall_clock and "wall_clock" not in d


def test_pipeline_contact_disabled_note():
    cfg = config(optimization={"n_init": 2, "n_sync": 2}, contact={"enabled": False})
    rep = run_pipeline(cfg, free_trajectory=static_far(cfg, (0, 0, 0)))
    assert rep.notes[0] == "contact detection disabled: object follows free motion"


def test_pipeline_failure_carries_partial_report():
    cfg = config(optimization={"n_init": 2})
    with pytest.raises(PipelineError) as info:
        run_pipeline(cfg, denoiser=NanDenoiser(), free_trajectory=static_far(cfg))
    part = info.value.partial
    assert not part.completed and part.free_trajectory is not None
    assert part.notes[-1].startswith("aborted in stage1: non-finite gradient in stage 1, iteration 0")


def test_pipeline_rejects_wrong_trajectory_length():
    cfg = config()
    short = ObjectTrajectory.from_positions(np.zeros((3, 2, 3)), np.ones(2), 20.0)
    with pytest.raises(PipelineError, match="trajectory has 3 frames"):
        run_pipeline(cfg, free_trajectory=short)


def test_pipeline_is_repeatable():
    cfg = config(optimization={"n_init": 3, "n_sync": 3})
    a = run_pipeline(cfg, free_trajectory=static_far(cfg)).to_dict()
    b = run_pipeline(cfg, free_trajectory=static_far(cfg)).to_dict()
    assert a == b
