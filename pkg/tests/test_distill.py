import io
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hoisim.distill import (DenoiserContractError, ExternalDenoiser, IdentityDenoiser, NoiseSchedule,
                            ProjectionDenoiser, SmoothingDenoiser, corrupt, decode_header, encode_motion,
                            hmsd_gradient, oracle_denoisers, read_message, serve)

SCHED = NoiseSchedule.linear()


def test_linear_schedule():
    assert SCHED.steps == 1000
    assert SCHED.alpha_bar[0] == pytest.approx(0.9999, abs=1e-15)
    assert SCHED.validate() == []
    assert np.all(np.diff(SCHED.alpha_bar) < 0)


def test_schedule_validation_flags_increase():
    assert NoiseSchedule(np.array([0.9, 0.95])).validate()


def test_corrupt_limits(rng):
    X = rng.normal(size=(4, 5))
    s = NoiseSchedule(np.array([1.0, 0.0]))
    xt, _ = corrupt(X, 0, s, rng)
    assert np.array_equal(xt, X)
    xt, eps = corrupt(X, 1, s, rng)
    assert np.array_equal(xt, eps)


def test_corrupt_reproducible():
    X = np.ones((3, 4))
    a = corrupt(X, 50, SCHED, np.random.default_rng(5))[0]
    b = corrupt(X, 50, SCHED, np.random.default_rng(5))[0]
    assert np.array_equal(a, b)


def test_corrupt_statistics():
    rng = np.random.default_rng(0)
    X = np.array([0.7, -1.3, 2.0])
    t = 400
    draws = np.stack([corrupt(X, t, SCHED, rng)[0] for _ in range(10_000)])
    ab = SCHED.alpha_bar[t]
    se = np.sqrt((1 - ab) / len(draws))
    assert np.all(np.abs(draws.mean(0) - np.sqrt(ab) * X) < 3 * se)
    # variance standard error for a normal sample: sigma^2 sqrt(2 / (n - 1))
    var_se = (1 - ab) * np.sqrt(2 / (len(draws) - 1))
    assert np.all(np.abs(draws.var(0, ddof=1) - (1 - ab)) < 3 * var_se)


def test_corrupt_rejects_bad_step(rng):
    with pytest.raises(ValueError):
        corrupt(np.zeros(3), 1000, SCHED, rng)


def test_identity_denoiser_without_noise_gives_zero_gradient(rng):
    s = NoiseSchedule(np.array([1.0]))
    g = hmsd_gradient(rng.normal(size=(5, 81)), IdentityDenoiser(s), s, 0, 0, rng=rng)
    assert np.all(g == 0)


def test_weight_at_first_step_is_tiny(rng):
    X = rng.normal(size=(5, 81))
    ref = rng.normal(size=(5, 81))
    g = hmsd_gradient(X, ProjectionDenoiser(ref), SCHED, 0, 0, rng=rng)
    assert np.linalg.norm(g) <= 1e-4 * np.linalg.norm(ref - X)


def test_gradient_points_away_from_prediction(rng):
    X = rng.normal(size=(4, 81))
    ref = rng.normal(size=(4, 81))
    g = hmsd_gradient(X, ProjectionDenoiser(ref), SCHED, 0, 100, rng=rng)
    assert np.sum(g * (X - ref)) > 0


def test_projection_expectation_is_mean_weight_times_residual():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(2, 15))
    ref = rng.normal(size=(2, 15))
    den = ProjectionDenoiser(ref)
    n = 4000
    samples = np.stack([hmsd_gradient(X, den, SCHED, 0, 100, rng=rng) for _ in range(n)])
    w = SCHED.weight(np.arange(101))
    expected = w.mean() * (X - ref)
    se = w.std() / np.sqrt(n) * np.abs(X - ref)
    assert np.all(np.abs(samples.mean(0) - expected) <= 3 * se + 1e-15)


def test_projection_descent_converges():
    rng = np.random.default_rng(11)
    ref = rng.normal(size=(10, 81))
    X = np.zeros_like(ref)
    den = ProjectionDenoiser(ref)
    norms = []
    for _ in range(500):
        X = X - 5.0 * hmsd_gradient(X, den, SCHED, 0, 100, rng=rng)
        norms.append(np.linalg.norm(X - ref))
    norms = np.array(norms)
    assert np.all(np.diff(norms) <= 0)
    assert norms[-1] < 1e-6 * np.linalg.norm(ref)


def test_projection_to_zero():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(3, 12))
    den = ProjectionDenoiser(np.zeros_like(X))
    for _ in range(300):
        X = X - 5.0 * hmsd_gradient(X, den, SCHED, 0, 100, rng=rng)
    assert np.abs(X).max() < 1e-4


def test_smoothing_preserves_constants():
    c = np.tile(np.linspace(-1, 1, 12), (9, 1))
    t = 30
    out = SmoothingDenoiser(SCHED, 5).predict_clean(np.sqrt(SCHED.alpha_bar[t]) * c, t, "")
    assert np.allclose(out, c, atol=1e-14)


def test_smoothing_matches_window_oracle(rng):
    x = rng.normal(size=(7, 4))
    out = SmoothingDenoiser(NoiseSchedule(np.array([1.0])), 3).predict_clean(x, 0, "")
    oracle = np.stack([x[max(0, i - 1):i + 2].mean(0) for i in range(7)])
    assert np.allclose(out, oracle, atol=1e-14)


def test_identity_denoiser_zero_expected_gradient():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(1, 12))
    den = IdentityDenoiser(SCHED)
    n = 10_000
    g = np.stack([hmsd_gradient(X, den, SCHED, 0, 100, rng=rng) for _ in range(n)])
    se = g.std(0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(g.mean(0)) < 3 * se + 1e-15)


def test_shape_mismatch_is_contract_error(rng):
    class Bad:
        def predict_clean(self, x_t, t, prompt):
            return x_t[:, :-1]
    with pytest.raises(DenoiserContractError):
        hmsd_gradient(np.zeros((3, 12)), Bad(), SCHED, 0, 10, rng=rng)


@given(T=st.integers(1, 8), J=st.integers(1, 24), kind=st.sampled_from(["projection", "smoothing", "identity"]))
def test_gradient_shape_preserved(T, J, kind):
    X = np.ones((T, 9 + 3 * J))
    den = oracle_denoisers(np.zeros_like(X), SCHED)[kind]
    g = hmsd_gradient(X, den, SCHED, 0, 100, samples=2, rng=np.random.default_rng(0))
    assert g.shape == X.shape


def test_samples_must_be_positive(rng):
    with pytest.raises(ValueError):
        hmsd_gradient(np.zeros((2, 12)), IdentityDenoiser(SCHED), SCHED, 0, 10, samples=0, rng=rng)


def test_wire_round_trip(rng):
    X = rng.normal(size=(6, 9 + 3 * 2)).astype(np.float32).astype(np.float64)
    msg = encode_motion(X, 2, 37)
    assert len(msg) == 16 + X.size * 4
    assert decode_header(msg[:16]) == (2, 6, 37)
    Y, J, step = read_message(io.BytesIO(msg))
    assert np.array_equal(X, Y) and J == 2 and step == 37


def test_wire_rejects_bad_magic():
    with pytest.raises(DenoiserContractError):
        decode_header(b"XXXX" + bytes(12))


def test_wire_truncated_payload(rng):
    msg = encode_motion(np.zeros((2, 12)), 1, 0)
    with pytest.raises(DenoiserContractError):
        read_message(io.BytesIO(msg[:-3]))


def test_serve_answers_each_request(rng):
    reqs = b"".join(encode_motion(np.full((2, 12), k, float), 1, k) for k in range(3))
    out = io.BytesIO()
    assert serve(lambda X, t, p: -X, io.BytesIO(reqs), out) == 3
    out.seek(0)
    for k in range(3):
        Y, _, step = read_message(out)
        assert step == k and np.all(Y == -k)


def test_external_denoiser_process(rng):
    X = rng.normal(size=(8, 9 + 3 * 24))
    cmd = [sys.executable, "-m", "hoisim.distill", "--kind", "smoothing", "--width", "3"]
    with ExternalDenoiser(cmd, 24, prompt="kick") as ext:
        got = ext.predict_clean(X, 40, "kick")
        got2 = ext.predict_clean(X, 41, "kick")
    want = SmoothingDenoiser(SCHED, 3).predict_clean(X.astype(np.float32).astype(np.float64), 40, "")
    assert np.allclose(got, want, rtol=1e-5, atol=1e-5)
    assert got2.shape == X.shape
