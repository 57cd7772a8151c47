"""Debug splat renderer: pinhole projection, isotropic screen-space
footprints and front-to-back alpha compositing in strict depth order."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import SplatCloud

CUTOFF = 3.0  # footprint radius in projected standard deviations


@dataclass(frozen=True)
class Camera:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    vertical_fov: float = math.radians(50.0)
    image_width: int = 256
    image_height: int = 256

    def validate(self) -> list[str]:
        out = []
        fwd = np.subtract(self.look_at, self.position)
        if np.linalg.norm(fwd) == 0:
            out.append("camera position equals look_at")
        elif np.linalg.norm(np.cross(fwd, self.up)) < 1e-9 * np.linalg.norm(fwd) * np.linalg.norm(self.up):
            out.append("up is parallel to the view direction")
        if not 0 < self.vertical_fov < math.pi:
            out.append("vertical_fov must lie in (0, pi)")
        if self.image_width < 1 or self.image_height < 1:
            out.append("image size must be positive")
        return out

    def basis(self) -> np.ndarray:
        """Rows: camera right, up, forward in world coordinates."""
        f = np.subtract(self.look_at, self.position).astype(np.float64)
        f /= np.linalg.norm(f)
        r = np.cross(f, self.up)
        r /= np.linalg.norm(r)
        return np.stack([r, np.cross(r, f), f])

    @property
    def focal(self) -> float:
        return 0.5 * self.image_height / math.tan(0.5 * self.vertical_fov)


def orbit_cameras(count: int, radius: float, elevation: float, center=(0.0, 0.0, 0.0), **kw) -> list[Camera]:
    """``count`` cameras evenly spaced in azimuth (starting on +x) at a fixed elevation angle."""
    if count < 1:
        raise ValueError("count must be >= 1")
    c = np.asarray(center, dtype=np.float64)
    cams = []
    for k in range(count):
        az = 2.0 * math.pi * k / count
        offset = radius * np.array([math.cos(elevation) * math.cos(az), math.sin(elevation),
                                    math.cos(elevation) * math.sin(az)])
        cams.append(Camera(tuple(c + offset), tuple(c), **kw))
    return cams


def render_frame(splats: SplatCloud, camera: Camera, background=(0.0, 0.0, 0.0),
                 return_transmittance: bool = False):
    """RGB image ``(H, W, 3)`` in [0, 1]; splats behind the camera are skipped."""
    H, W = camera.image_height, camera.image_width
    B = camera.basis()
    cam = (splats.positions - np.asarray(camera.position, dtype=np.float64)) @ B.T
    z = cam[:, 2]
    f = camera.focal
    visible = np.flatnonzero(z > 1e-9)
    order = visible[np.argsort(z[visible], kind="stable")]

    color = np.zeros((H, W, 3))
    trans = np.ones((H, W))
    cx, cy = 0.5 * W, 0.5 * H
    for i in order:
        u = cx + f * cam[i, 0] / z[i]
        v = cy - f * cam[i, 1] / z[i]
        s = f * splats.radii[i] / z[i]
        reach = CUTOFF * s
        c0, c1 = max(0, int(math.floor(u - reach))), min(W, int(math.ceil(u + reach)) + 1)
        r0, r1 = max(0, int(math.floor(v - reach))), min(H, int(math.ceil(v + reach)) + 1)
        if c0 >= c1 or r0 >= r1:
            continue
        px = np.arange(c0, c1) + 0.5 - u
        py = np.arange(r0, r1) + 0.5 - v
        d2 = py[:, None] ** 2 + px[None, :] ** 2
        alpha = splats.opacities[i] * np.exp(-d2 / (2.0 * s * s))
        alpha[d2 > reach * reach] = 0.0
        T = trans[r0:r1, c0:c1]
        color[r0:r1, c0:c1] += (T * alpha)[..., None] * splats.colors[i]
        trans[r0:r1, c0:c1] = T * (1.0 - alpha)
    image = color + trans[..., None] * np.asarray(background, dtype=np.float64)
    image = np.clip(image, 0.0, 1.0)
    if return_transmittance:
        return image, trans
    return image


def write_ppm(path, image: np.ndarray) -> Path:
    """Binary P6, maxval 255."""
    path = Path(path)
    data = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    H, W = data.shape[:2]
    path.write_bytes(f"P6\n{W} {H}\n255\n".encode("ascii") + data.tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.frombuffer(raw[pos + 1:pos + 1 + W * H * 3], dtype=np.uint8)
    return data.reshape(H, W, 3).astype(np.float64) / maxval


def frame_filename(frame: int, camera: int) -> str:
    return f"cam{camera:02d}_frame{frame:04d}.ppm"
