"""Kinematic human, particle object and the optimisation loop that makes the
human strike the object with a physically consistent outcome."""
from .scene import (ContactParams, DenoiserSpec, MaterialParams, MotionSequence, MpmParams,
                    OptimizationParams, ParticleObject, SceneConfig, Skeleton, SkinnedHuman, Splat,
                    SplatCloud, default_scene, validate_scene)

__version__ = "0.1.0"

__all__ = [
    "ContactParams", "DenoiserSpec", "MaterialParams", "MotionSequence", "MpmParams", "OptimizationParams",
    "ParticleObject", "SceneConfig", "Skeleton", "SkinnedHuman", "Splat", "SplatCloud", "default_scene",
    "validate_scene",
]
