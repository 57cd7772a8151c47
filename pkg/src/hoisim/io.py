"""File formats: ASCII PLY point clouds, TOML scene/skeleton/motion files,
the binary trajectory format and the JSON run report.

Trajectory file layout (all little-endian)::

    magic   8 bytes  b"HOITRAJ1"
    version u32      1
    T       u32      frames
    N       u32      particles
    flags   u32      reserved, 0
    fps     f64
    positions  T*N*3 f32, frame-major
    com        T*3   f32
    masses     N     f32
"""
from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import fields, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np
import tomli
import tomli_w

from .mpm import ObjectTrajectory
from .scene import (ContactParams, DenoiserSpec, MaterialParams, MotionSequence, MpmParams,
                    OptimizationParams, ParticleObject, SceneConfig, Skeleton, builtin_ball,
                    builtin_toy_humanoid, validate_scene)

log = logging.getLogger(__name__)

TRAJ_MAGIC = b"HOITRAJ1"
TRAJ_VERSION = 1
_TRAJ_HEADER = struct.Struct("<8sIIIId")


class ParseError(ValueError):
    def __init__(self, path, line: Optional[int], message: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path, self.line = path, line


class ConfigError(ValueError):
    def __init__(self, errors: list[str], path=None):
        head = f"{path}: " if path is not None else ""
        super().__init__(head + "; ".join(errors))
        self.errors = list(errors)


# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {"char", "uchar", "short", "ushort", "int", "uint", "float", "double",
              "int8", "uint8", "int16", "uint16", "int32", "uint32", "float32", "float64"}


def load_ply_points(path):
    """Positions ``(N, 3)`` and colors ``(N, 3)`` in [0, 1] or None from an ASCII PLY."""
    path = Path(path)
    lines = path.read_text(encoding="ascii", errors="replace").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError(path, 1, "missing 'ply' magic line")
    count = None
    props: list[str] = []
    in_vertex = False
    body = None
    for ln in range(1, len(lines)):
        tok = lines[ln].split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ParseError(path, ln + 1, f"only ASCII PLY is supported, got format {' '.join(tok[1:])!r}")
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError(path, ln + 1, "malformed element line")
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    count = int(tok[2])
                except ValueError:
                    raise ParseError(path, ln + 1, f"bad vertex count {tok[2]!r}") from None
        elif tok[0] == "property":
            if tok[1] == "list" or len(tok) != 3 or tok[1] not in _PLY_TYPES:
                if in_vertex:
                    raise ParseError(path, ln + 1, "unsupported vertex property")
                continue
            if in_vertex:
                props.append(tok[2])
        elif tok[0] == "end_header":
            body = ln + 1
            break
        else:
            raise ParseError(path, ln + 1, f"unexpected header keyword {tok[0]!r}")
    if body is None:
        raise ParseError(path, len(lines), "missing end_header")
    if count is None:
        raise ParseError(path, body, "no vertex element")
    for axis in "xyz":
        if axis not in props:
            raise ParseError(path, body, f"vertex property {axis!r} missing")
    col = [props.index(c) for c in ("red", "green", "blue")] if all(
        c in props for c in ("red", "green", "blue")) else None
    data = np.empty((count, len(props)))
    for i in range(count):
        ln = body + i
        if ln >= len(lines):
            raise ParseError(path, ln + 1, f"expected {count} vertices, file ends after {i}")
        tok = lines[ln].split()
        if len(tok) < len(props):
            raise ParseError(path, ln + 1, f"vertex {i} has {len(tok)} values, expected {len(props)}")
        try:
            data[i] = [float(v) for v in tok[:len(props)]]
        except ValueError as exc:
            raise ParseError(path, ln + 1, str(exc)) from None
    pos = data[:, [props.index(a) for a in "xyz"]]
    colors = None
    if col is not None:
        colors = data[:, col]
        if colors.size and colors.max() > 1.0:
            colors = colors / 255.0
    return pos, colors


def write_ply_points(path, positions, colors=None) -> Path:
    """ASCII PLY with shortest round-trip float formatting; colors as uchar."""
    path = Path(path)
    positions = np.asarray(positions, dtype=np.float64)
    head = ["ply", "format ascii 1.0", f"element vertex {len(positions)}",
            "property double x", "property double y", "property double z"]
    if colors is not None:
        rgb = np.clip(np.rint(np.asarray(colors) * 255.0), 0, 255).astype(int)
        head += ["property uchar red", "property uchar green", "property uchar blue"]
    head.append("end_header")
    rows = []
    for i, p in enumerate(positions):
        row = " ".join(repr(float(v)) for v in p)
        if colors is not None:
            row += " " + " ".join(str(c) for c in rgb[i])
        rows.append(row)
    path.write_text("\n".join(head + rows) + "\n", encoding="ascii")
    return path


# ---------------------------------------------------------------------------
# TOML helpers

def _read_toml(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ParseError(path, None, str(exc)) from None


def _write_toml(path, data: dict) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        tomli_w.dump(data, fh)
    return path


def _require(d: dict, key: str, path, errors: list):
    if key not in d:
        errors.append(f"missing required key {key!r}")
        return None
    return d[key]


def _unknown(d: dict, known, where: str, strict: bool, errors: list):
    for k in d:
        if k not in known:
            msg = f"unknown key {where}{k!r}"
            if strict:
                errors.append(msg)
            else:
                log.warning(msg)


# ---------------------------------------------------------------------------
# skeleton and motion

def load_skeleton(path, strict: bool = True) -> Skeleton:
    d = _read_toml(path)
    errors: list[str] = []
    _unknown(d, ("format", "parent", "offsets", "names"), "", strict, errors)
    parent = _require(d, "parent", path, errors)
    offsets = _require(d, "offsets", path, errors)
    if errors:
        raise ConfigError(errors, path)
    try:
        skel = Skeleton(np.array(parent, dtype=np.int64), np.array(offsets, dtype=np.float64),
                        tuple(d.get("names", ())))
    except ValueError as exc:
        raise ConfigError([f"dimension error: {exc}"], path) from None
    bad = [f"{p}: {m}" for p, m in skel.validate("skeleton")]
    if bad:
        raise ConfigError(bad, path)
    return skel


def export_skeleton(path, skeleton: Skeleton) -> Path:
    data = {"format": "hoisim-skeleton", "parent": skeleton.parent.tolist(),
            "offsets": skeleton.rest_offsets.tolist()}
    if skeleton.names:
        data["names"] = list(skeleton.names)
    return _write_toml(path, data)


def load_motion(path, joints: Optional[int] = None, strict: bool = True) -> MotionSequence:
    d = _read_toml(path)
    errors: list[str] = []
    _unknown(d, ("format", "fps", "joints", "root_translation", "global_orientation", "joint_poses"),
             "", strict, errors)
    vals = {k: _require(d, k, path, errors)
            for k in ("fps", "joints", "root_translation", "global_orientation", "joint_poses")}
    if errors:
        raise ConfigError(errors, path)
    J = int(vals["joints"])
    if joints is not None and J != joints:
        raise ConfigError([f"dimension error: motion has {J} joints, skeleton has {joints}"], path)
    try:
        r = np.array(vals["root_translation"], dtype=np.float64)
        om = np.array(vals["global_orientation"], dtype=np.float64)
        th = np.array(vals["joint_poses"], dtype=np.float64)
        T = r.shape[0]
        if r.shape != (T, 3) or om.shape != (T, 6) or th.shape != (T, 3 * J):
            raise ValueError(f"shapes {r.shape}, {om.shape}, {th.shape} do not match T={T}, J={J}")
        motion = MotionSequence(r, om, th.reshape(T, J, 3), float(vals["fps"]))
    except ValueError as exc:
        raise ConfigError([f"dimension error: {exc}"], path) from None
    bad = [f"{p}: {m}" for p, m in motion.validate("motion", joints)]
    if bad:
        raise ConfigError(bad, path)
    return motion


def export_motion(path, motion: MotionSequence) -> Path:
    T = motion.frame_count
    return _write_toml(path, {
        "format": "hoisim-motion", "fps": float(motion.fps), "joints": motion.joint_count,
        "root_translation": motion.root_translation.tolist(),
        "global_orientation": motion.global_orientation.tolist(),
        "joint_poses": motion.joint_poses.reshape(T, -1).tolist(),
    })


# ---------------------------------------------------------------------------
# scene config

_SECTIONS = {"material": MaterialParams, "mpm": MpmParams, "optimization": OptimizationParams,
             "contact": ContactParams, "denoiser": DenoiserSpec}
_SCENE_KEYS = ("frames", "fps", "motion_prompt", "object_initial_velocity")
_OBJECT_KEYS = ("source", "center", "radius", "spacing", "particle_volume", "splat_radius", "offset", "color")
_OBJECT_DEFAULTS = {"source": "builtin:ball", "center": [0.0, 0.3, 0.5], "radius": 0.12, "spacing": 0.025,
                    "offset": [0.0, 0.0, 0.0]}


def _coerce(value, default, key: str, errors: list):
    """Coerce a TOML value to the type of a dataclass default."""
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError("expected true or false")
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError("expected an integer")
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError("expected a number")
            return float(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise TypeError("expected a string")
            return value
        if default is None or isinstance(default, tuple):
            if not isinstance(value, list):
                raise TypeError("expected an array")
            if default is not None and default and isinstance(default[0], str):
                return tuple(str(v) for v in value)
            out = tuple(float(v) for v in value)
            expected = 3 if default is None else len(default)
            if len(out) != expected:
                raise TypeError(f"expected {expected} values")
            return out
    except (TypeError, ValueError) as exc:
        errors.append(f"{key}: {exc}")
        return default
    return value


def _section(cls, data: dict, name: str, strict: bool, errors: list):
    known = {f.name: f for f in fields(cls)}
    _unknown(data, known, f"{name}.", strict, errors)
    base = cls()
    kw = {k: _coerce(v, getattr(base, k), f"{name}.{k}", errors) for k, v in data.items() if k in known}
    return replace(base, **kw)


def _build_object(spec: dict, material: MaterialParams, base_dir: Path, errors: list) -> Optional[ParticleObject]:
    src = spec["source"]
    offset = np.asarray(spec.get("offset", (0.0, 0.0, 0.0)), dtype=np.float64)
    if src == "builtin:ball":
        obj = builtin_ball(spec["center"], float(spec["radius"]), float(spec["spacing"]), material,
                           **({"color": tuple(spec["color"])} if "color" in spec else {}))
    else:
        if "particle_volume" not in spec:
            errors.append("object: missing required key 'particle_volume' for a point-cloud source")
            return None
        pts, colors = load_ply_points(base_dir / src)
        color = colors if colors is not None else tuple(spec.get("color", (0.2, 0.4, 0.9)))
        obj = ParticleObject.from_points(pts, particle_volume=float(spec["particle_volume"]), material=material,
                                         radius=float(spec.get("splat_radius", 0.01)), color=color)
    return obj.translated(offset) if np.any(offset) else obj


def config_from_dict(d: dict, base_dir=".", strict: bool = True, path=None) -> SceneConfig:
    errors: list[str] = []
    _unknown(d, ("scene", "human", "object") + tuple(_SECTIONS), "", strict, errors)
    scene = d.get("scene", {})
    _unknown(scene, _SCENE_KEYS, "scene.", strict, errors)
    parts = {name: _section(cls, d.get(name, {}), name, strict, errors) for name, cls in _SECTIONS.items()}

    human_spec = d.get("human", {})
    _unknown(human_spec, ("source",), "human.", strict, errors)
    if human_spec.get("source", "builtin:toy24") != "builtin:toy24":
        errors.append("human.source: only 'builtin:toy24' is available")

    obj_spec = dict(_OBJECT_DEFAULTS)
    obj_spec.update(d.get("object", {}))
    _unknown(d.get("object", {}), _OBJECT_KEYS, "object.", strict, errors)
    obj = None
    if not errors:
        try:
            obj = _build_object(obj_spec, parts["material"], Path(base_dir), errors)
        except (OSError, ParseError) as exc:
            errors.append(f"object.source: {exc}")
    if errors:
        raise ConfigError(errors, path)

    base = SceneConfig(builtin_toy_humanoid(), obj)
    kw = {}
    for key in _SCENE_KEYS:
        if key in scene:
            kw[key] = _coerce(scene[key], getattr(base, key), f"scene.{key}", errors)
    cfg = replace(base, mpm=parts["mpm"], optimization=parts["optimization"], contact=parts["contact"],
                  denoiser=parts["denoiser"], sources={"human": "builtin:toy24", "object": obj_spec}, **kw)
    errors += validate_scene(cfg)
    if errors:
        raise ConfigError(errors, path)
    return apply_env_overrides(cfg)


def load_config(path, strict: bool = True) -> SceneConfig:
    path = Path(path)
    return config_from_dict(_read_toml(path), path.parent, strict, path)


def apply_env_overrides(config: SceneConfig) -> SceneConfig:
    seed = os.environ.get("HOI_SEED")
    if seed:
        config = replace(config, optimization=replace(config.optimization, seed=int(seed)))
    return config


def _plain(obj) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_to_dict(config: SceneConfig) -> dict:
    """TOML-compatible echo of a config; ``config_from_dict`` rebuilds it."""
    obj_src = config.sources.get("object", "builtin:ball")
    obj_spec = dict(_OBJECT_DEFAULTS) if obj_src == "builtin:ball" else obj_src
    out = {
        "scene": {"frames": config.frames, "fps": config.fps, "motion_prompt": config.motion_prompt,
                  "object_initial_velocity": list(config.object_initial_velocity)},
        "human": {"source": "builtin:toy24"},
        "object": obj_spec,
        "material": {f.name: getattr(config.object.material, f.name) for f in fields(MaterialParams)},
    }
    for name, attr in (("mpm", config.mpm), ("optimization", config.optimization),
                       ("contact", config.contact), ("denoiser", config.denoiser)):
        out[name] = {f.name: getattr(attr, f.name) for f in fields(attr)}
    return _plain(out)


def export_config(path, config: SceneConfig) -> Path:
    return _write_toml(path, config_to_dict(config))


# ---------------------------------------------------------------------------
# trajectory

def export_trajectory(path, trajectory: ObjectTrajectory) -> Path:
    path = Path(path)
    T, N = trajectory.frame_count, trajectory.particle_count
    try:
        with open(path, "wb") as fh:
            fh.write(_TRAJ_HEADER.pack(TRAJ_MAGIC, TRAJ_VERSION, T, N, 0, float(trajectory.fps)))
            fh.write(np.ascontiguousarray(trajectory.positions, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(trajectory.com, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(trajectory.masses, dtype="<f4").tobytes())
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    return path


def load_trajectory(path) -> ObjectTrajectory:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _TRAJ_HEADER.size:
        raise ParseError(path, None, "file shorter than the trajectory header")
    magic, version, T, N, _, fps = _TRAJ_HEADER.unpack_from(raw)
    if magic != TRAJ_MAGIC:
        raise ParseError(path, None, f"bad magic {magic!r}")
    if version != TRAJ_VERSION:
        raise ParseError(path, None, f"unsupported trajectory version {version}")
    expected = _TRAJ_HEADER.size + 4 * (T * N * 3 + T * 3 + N)
    if len(raw) != expected:
        raise ParseError(path, None, f"size {len(raw)} bytes, expected {expected} for T={T}, N={N}")
    off = _TRAJ_HEADER.size
    pos = np.frombuffer(raw, "<f4", T * N * 3, off).reshape(T, N, 3)
    off += pos.nbytes
    com = np.frombuffer(raw, "<f4", T * 3, off).reshape(T, 3)
    off += com.nbytes
    masses = np.frombuffer(raw, "<f4", N, off)
    return ObjectTrajectory(pos.astype(np.float64), com.astype(np.float64), masses.astype(np.float64), fps)


# ---------------------------------------------------------------------------
# report

def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def export_report(path, report) -> Path:
    """JSON report; a run without contact carries ``"contact": {"detected": false}``."""
    d = report.to_dict() if hasattr(report, "to_dict") else report
    path = Path(path)
    path.write_text(json.dumps(d, indent=2, sort_keys=True, default=_json_default, allow_nan=True) + "\n")
    return path


def load_report(path) -> dict:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.msg) from None
    if d.get("format") != "hoisim-report":
        raise ParseError(path, None, "not a run report")
    return d


def export_timings(path, wall_clock: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps({k: round(v, 6) for k, v in wall_clock.items()}, indent=2) + "\n")
    return path


def sniff(path) -> str:
    """Artifact kind from content: ply, trajectory, report, motion, skeleton, config or ppm."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(16)
    if head.startswith(TRAJ_MAGIC):
        return "trajectory"
    if head.startswith(b"ply"):
        return "ply"
    if head.startswith(b"P6"):
        return "ppm"
    if head.lstrip().startswith(b"{"):
        return "report"
    d = _read_toml(path)
    fmt = d.get("format")
    if fmt == "hoisim-motion":
        return "motion"
    if fmt == "hoisim-skeleton":
        return "skeleton"
    return "config"

