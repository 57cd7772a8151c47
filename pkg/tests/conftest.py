from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hoisim.clips import synthetic_kick
from hoisim.scene import builtin_toy_humanoid

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

ROOT = Path(__file__).resolve().parents[1]
FIXTURE_CONFIG = ROOT / "configs" / "kick_fixture.toml"

# (criterion, verdict line) pairs filled by the acceptance suite
ACCEPTANCE: list = []


def fixture_config(**sections):
    """The kick fixture config with per-section overrides."""
    import copy

    import tomli

    from hoisim import io

    with open(FIXTURE_CONFIG, "rb") as fh:
        d = tomli.load(fh)
    d = copy.deepcopy(d)
    for name, values in sections.items():
        d.setdefault(name, {}).update(values)
    return io.config_from_dict(d, FIXTURE_CONFIG.parent)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def human():
    return builtin_toy_humanoid()


@pytest.fixture(scope="session")
def skeleton(human):
    return human.skeleton


@pytest.fixture(scope="session")
def kick():
    return synthetic_kick()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_frames(rng, n, joints=24, scale=0.4):
    """Random frame vectors with a well-conditioned 6D orientation."""
    X = rng.normal(scale=scale, size=(n, 9 + 3 * joints))
    X[:, 3:9] += np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    return X


def contact_scene(n_close: int, gap: float, grid=(40, 25), spacing=0.05):
    """Two-joint human whose second joint carries a flat grid of splats, and a
    static object with ``n_close`` particles at distance ``gap`` from distinct
    splats plus a bulk block well clear of every splat.

    Frame 0 has the human 1 m behind the object; frame 1 is the contact pose,
    reached by moving toward +z so the approach speed is positive.
    """
    from hoisim.mpm import ObjectTrajectory
    from hoisim.scene import IDENTITY_6D, MotionSequence, Skeleton, SkinnedHuman, SplatCloud

    skel = Skeleton(np.array([-1, 0]), np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
    gx, gy = grid
    ii, jj = np.meshgrid(np.arange(gx), np.arange(gy), indexing="ij")
    sheet = np.stack([1.0 + spacing * (ii.ravel() - gx / 2), spacing * (jj.ravel() - gy / 2),
                      np.zeros(gx * gy)], axis=1)
    root = np.array([[-5.0, 0.0, 0.0]] * 10)
    pts = np.concatenate([root, sheet])
    W = np.zeros((len(pts), 2))
    W[:10, 0] = 1.0
    W[10:, 1] = 1.0
    human = SkinnedHuman(skel, SplatCloud(pts, 0.01, 1.0, (0.5, 0.5, 0.5)), W)

    # every 7th splat: spread out and never adjacent
    chosen = sheet[np.arange(n_close) * 7]
    side = np.where(np.arange(n_close) == 0, -1.0, 1.0)[:, None]
    close = chosen + side * np.array([0.0, 0.0, gap])
    b = np.arange(0.0, 0.101, 0.05)
    block = np.stack(np.meshgrid(b + 1.0, b, b + 0.1, indexing="ij"), -1).reshape(-1, 3)
    obj = np.concatenate([close, block])
    traj = ObjectTrajectory.from_positions(np.stack([obj, obj]), np.ones(len(obj)), 20.0)

    r = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 0.0]])
    motion = MotionSequence(r, np.tile(IDENTITY_6D, (2, 1)), np.zeros((2, 2, 3)), 20.0)
    return human, motion, traj


def brute_force_contact(human, motion, traj, frame, joint, d, tau):
    """Exhaustive nearest-neighbour oracle: (aabb_overlap, fraction, detected)."""
    from hoisim.kinematics import forward_kinematics, skin_splats

    pos = skin_splats(human, forward_kinematics(human.skeleton, motion.to_array()[frame]))
    mine = pos[np.argmax(human.skinning_weights, axis=1) == joint]
    obj = traj.positions[frame]
    overlap = bool(np.all(mine.min(0) <= obj.max(0)) and np.all(obj.min(0) <= mine.max(0)))
    dist = np.sqrt(((mine[:, None, :] - obj[None, :, :]) ** 2).sum(-1)).min(1)
    frac = np.count_nonzero(dist <= d) / len(mine)
    return overlap, frac, overlap and frac >= tau
