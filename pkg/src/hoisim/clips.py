"""Synthetic reference motions for the built-in humanoid."""
from __future__ import annotations

import numpy as np

from .scene import IDENTITY_6D, MotionSequence

LEFT_HIP, LEFT_KNEE, RIGHT_SHOULDER, LEFT_SHOULDER = 1, 4, 17, 16


def synthetic_kick(frames: int = 40, fps: float = 20.0, peak_frame: int = 20,
                   swing: float = 0.25, joints: int = 24) -> MotionSequence:
    """Left-leg forward kick with one speed peak between ``peak_frame`` and
    ``peak_frame + 1``: a tanh hip swing, slight knee extension and a small
    counter-swing of the arms.  All angles stay within ``swing`` radians."""
    t = np.arange(frames, dtype=np.float64)
    s = 0.5 * (1.0 + np.tanh((t - (peak_frame + 0.5)) / 2.5))
    theta = np.zeros((frames, joints, 3))
    # about +x, a negative angle swings the leg toward +z (forward)
    theta[:, LEFT_HIP, 0] = 0.1 - (0.1 + swing) * s
    theta[:, LEFT_KNEE, 0] = 0.25 * (1.0 - s)
    theta[:, RIGHT_SHOULDER, 2] = 0.15 * s
    theta[:, LEFT_SHOULDER, 2] = -0.05 * s
    root = np.zeros((frames, 3))
    root[:, 2] = 0.03 * s
    return MotionSequence(root, np.tile(IDENTITY_6D, (frames, 1)), theta, fps)
