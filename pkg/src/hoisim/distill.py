"""Human-motion score distillation: noise schedule, corruption, pluggable
denoisers and the distillation gradient.

Sign convention: :func:`hmsd_gradient` returns ``E[w(t) (X - X0_hat)]`` so a
descent step ``X <- X - lr * g`` moves the motion toward the denoiser's clean
prediction.
"""
from __future__ import annotations

import os
import struct
import subprocess
import sys
from dataclasses import dataclass
from typing import BinaryIO, Callable, Protocol, Sequence

import numpy as np

MAGIC = b"HMSD"
_HEADER = struct.Struct("<4sIII")  # magic, J, T, step


class DenoiserContractError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    alpha_bar: np.ndarray

    @property
    def steps(self) -> int:
        return int(self.alpha_bar.shape[0])

    @classmethod
    def linear(cls, steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, steps)
        return cls(np.cumprod(1.0 - betas))

    def weight(self, t) -> np.ndarray:
        return 1.0 - self.alpha_bar[t]

    def validate(self) -> list[str]:
        out = []
        if np.any(np.diff(self.alpha_bar) > 0):
            out.append("alpha_bar must be non-increasing")
        if not (self.alpha_bar[0] >= 0.99 and np.all(self.alpha_bar > 0) and np.all(self.alpha_bar <= 1)):
            out.append("alpha_bar must lie in (0, 1] with alpha_bar[0] >= 0.99")
        return out


class Denoiser(Protocol):
    def predict_clean(self, x_t: np.ndarray, t: int, prompt: str) -> np.ndarray: ...


class ProjectionDenoiser:
    """Ignores its input and always predicts ``reference``."""

    def __init__(self, reference):
        self.reference = np.asarray(reference, dtype=np.float64)

    def predict_clean(self, x_t, t, prompt):
        return self.reference


class IdentityDenoiser:
    def __init__(self, schedule: NoiseSchedule):
        self.schedule = schedule

    def predict_clean(self, x_t, t, prompt):
        return x_t / np.sqrt(self.schedule.alpha_bar[t])


class SmoothingDenoiser:
    """Centred moving average over frames of the de-scaled input; the window
    is truncated at the sequence ends so constants are preserved."""

    def __init__(self, schedule: NoiseSchedule, width: int = 5):
        self.schedule = schedule
        self.width = int(width)

    def predict_clean(self, x_t, t, prompt):
        x = np.asarray(x_t) / np.sqrt(self.schedule.alpha_bar[t])
        T = x.shape[0]
        half = self.width // 2
        csum = np.concatenate([np.zeros((1,) + x.shape[1:]), np.cumsum(x, axis=0)])
        lo = np.clip(np.arange(T) - half, 0, T)
        hi = np.clip(np.arange(T) + half + 1, 0, T)
        count = (hi - lo).reshape((T,) + (1,) * (x.ndim - 1))
        return (csum[hi] - csum[lo]) / count


def oracle_denoisers(reference, schedule: NoiseSchedule, width: int = 5) -> dict[str, Denoiser]:
    return {"projection": ProjectionDenoiser(reference),
            "smoothing": SmoothingDenoiser(schedule, width),
            "identity": IdentityDenoiser(schedule)}


def corrupt(X, t: int, schedule: NoiseSchedule, rng: np.random.Generator):
    if not 0 <= t < schedule.steps:
        raise ValueError(f"timestep {t} outside schedule of {schedule.steps} steps")
    X = np.asarray(X, dtype=np.float64)
    eps = rng.standard_normal(X.shape)
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * X + np.sqrt(1.0 - ab) * eps, eps


def hmsd_gradient(X, denoiser: Denoiser, schedule: NoiseSchedule, t_min: int, t_max: int,
                  prompt: str = "", samples: int = 1, rng: np.random.Generator = None,
                  return_loss: bool = False):
    """Monte-Carlo ``E_{t, eps}[w(t) (X - X0_hat(X_t, t))]`` with t uniform on [t_min, t_max].

    With ``return_loss`` also returns the matching surrogate
    ``E[w(t) ||X0_hat - X||^2] / 2`` (prediction held constant).
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    X = np.asarray(X, dtype=np.float64)
    grad = np.zeros_like(X)
    loss = 0.0
    for _ in range(samples):
        t = int(rng.integers(t_min, t_max + 1))
        x_t, _ = corrupt(X, t, schedule, rng)
        x0 = np.asarray(denoiser.predict_clean(x_t, t, prompt), dtype=np.float64)
        if x0.shape != X.shape:
            raise DenoiserContractError(f"denoiser returned shape {x0.shape}, expected {X.shape}")
        resid = X - x0
        w = schedule.weight(t)
        grad += w * resid
        loss += 0.5 * w * float(np.sum(resid * resid))
    grad /= samples
    if return_loss:
        return loss / samples, grad
    return grad


# ---------------------------------------------------------------------------
# External denoiser wire format: a 16-byte little-endian header
# (magic "HMSD", J, T, step as uint32) followed by T*(9+3J) float32 values,
# frames-major in [r | omega | theta] order.  The response uses the same layout.

def encode_motion(X: np.ndarray, joints: int, step: int) -> bytes:
    X = np.asarray(X)
    T = X.shape[0]
    if X.shape != (T, 9 + 3 * joints):
        raise ValueError(f"motion of shape {X.shape} does not match J={joints}")
    return _HEADER.pack(MAGIC, joints, T, step) + X.astype("<f4").tobytes()


def decode_header(header: bytes) -> tuple[int, int, int]:
    magic, J, T, step = _HEADER.unpack(header)
    if magic != MAGIC:
        raise DenoiserContractError(f"bad magic {magic!r}")
    return J, T, step


def read_message(stream: BinaryIO):
    """One framed motion from ``stream``; None at clean end of stream."""
    header = stream.read(_HEADER.size)
    if not header:
        return None
    if len(header) != _HEADER.size:
        raise DenoiserContractError("truncated header")
    J, T, step = decode_header(header)
    n = T * (9 + 3 * J) * 4
    payload = stream.read(n)
    if len(payload) != n:
        raise DenoiserContractError("truncated payload")
    X = np.frombuffer(payload, dtype="<f4").reshape(T, 9 + 3 * J).astype(np.float64)
    return X, J, step


def serve(predict: Callable[[np.ndarray, int, str], np.ndarray], instream: BinaryIO,
          outstream: BinaryIO, prompt: str = "") -> int:
    """Answer requests until end of input; returns the number served."""
    served = 0
    while True:
        msg = read_message(instream)
        if msg is None:
            return served
        X, J, step = msg
        outstream.write(encode_motion(predict(X, step, prompt), J, step))
        outstream.flush()
        served += 1


class ExternalDenoiser:
    """Talks to a long-running process over stdin/stdout using the framed
    format above.  The prompt and guidance scale are passed to the process
    once, through ``HOI_PROMPT`` and ``HOI_GUIDANCE``."""

    def __init__(self, command: Sequence[str], joints: int, prompt: str = "", guidance_scale: float = 7.5):
        env = dict(os.environ, HOI_PROMPT=prompt, HOI_GUIDANCE=repr(guidance_scale))
        self.joints = joints
        self.proc = subprocess.Popen(list(command), stdin=subprocess.PIPE, stdout=subprocess.PIPE, env=env)

    def predict_clean(self, x_t, t, prompt):
        self.proc.stdin.write(encode_motion(x_t, self.joints, t))
        self.proc.stdin.flush()
        msg = read_message(self.proc.stdout)
        if msg is None:
            raise DenoiserContractError("external denoiser closed its output")
        X, J, step = msg
        if J != self.joints or step != t or X.shape != np.shape(x_t):
            raise DenoiserContractError("external denoiser response does not match the request")
        return X

    def close(self):
        if self.proc.poll() is None:
            self.proc.stdin.close()
            self.proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _main(argv=None) -> int:
    import argparse

    ap = argparse.ArgumentParser(description="Serve an oracle denoiser over stdin/stdout.")
    ap.add_argument("--kind", choices=("identity", "smoothing", "zero"), default="identity")
    ap.add_argument("--width", type=int, default=5)
    args = ap.parse_args(argv)
    sched = NoiseSchedule.linear()
    if args.kind == "zero":
        def predict(X, t, p):
            return np.zeros_like(X)
    else:
        den = IdentityDenoiser(sched) if args.kind == "identity" else SmoothingDenoiser(sched, args.width)
        predict = den.predict_clean
    serve(predict, sys.stdin.buffer, sys.stdout.buffer, os.environ.get("HOI_PROMPT", ""))
    return 0


if __name__ == "__main__":
    sys.exit(_main())
