"""Seeded synthetic distortions and reference shapes for desk-scale validation."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .cloud_io import NormalizedCloud, RawPointCloud
from .errors import ConfigError, InsufficientDensity

MIN_POINTS = 30


class DistortionKind(Enum):
    GaussianGeometry = "gaussian"
    Dropout = "dropout"
    ColorQuantize = "quantize"

    @classmethod
    def parse(cls, token: str) -> "DistortionKind":
        for kind in cls:
            if token.lower() in (kind.value, kind.name.lower()):
                return kind
        raise ConfigError(f"unknown distortion kind {token!r}")


@dataclass(frozen=True)
class DistortionSpec:
    kind: DistortionKind
    level: float
    seed: int = 0

    def __post_init__(self):
        lvl = self.level
        if self.kind is DistortionKind.GaussianGeometry and not lvl >= 0:
            raise ConfigError("gaussian sigma must be >= 0")
        if self.kind is DistortionKind.Dropout and not 0 <= lvl < 1:
            raise ConfigError("dropout fraction must lie in [0, 1)")
        if self.kind is DistortionKind.ColorQuantize and (lvl != int(lvl) or not 1 <= lvl <= 8):
            raise ConfigError("quantize level is the retained bit count, 1..8")

    @property
    def is_identity(self) -> bool:
        if self.kind is DistortionKind.ColorQuantize:
            return self.level == 8
        return self.level == 0


def apply_distortion(cloud: NormalizedCloud, spec: DistortionSpec) -> NormalizedCloud:
    if spec.is_identity:
        return NormalizedCloud(cloud.positions.copy(), cloud.colors.copy(), cloud.has_color)
    rng = np.random.default_rng(spec.seed)
    if spec.kind is DistortionKind.GaussianGeometry:
        noise = rng.normal(0.0, spec.level, size=cloud.positions.shape)
        return NormalizedCloud(cloud.positions + noise, cloud.colors, cloud.has_color)
    if spec.kind is DistortionKind.Dropout:
        n_drop = int(round(spec.level * cloud.count))
        keep = np.sort(rng.permutation(cloud.count)[n_drop:])
        if len(keep) < MIN_POINTS:
            raise InsufficientDensity(f"dropout leaves {len(keep)} points (< {MIN_POINTS})")
        return cloud.take(keep)
    bits = int(spec.level)
    levels = (1 << bits) - 1
    top = cloud.colors.astype(np.int64) >> (8 - bits)
    colors = (top * 255 * 2 + levels) // (2 * levels)
    return NormalizedCloud(cloud.positions, colors.astype(np.uint8), cloud.has_color)


def distortion_ladder(cloud: NormalizedCloud, kind: DistortionKind, levels, seed: int = 0):
    levels = list(levels)
    if not levels:
        raise ConfigError("distortion ladder needs at least one level")
    return [
        (lvl, apply_distortion(cloud, DistortionSpec(kind, lvl, seed + i)))
        for i, lvl in enumerate(levels)
    ]


# -- synthetic reference shapes ---------------------------------------------

SHAPES = ("sphere", "torus", "wave")


def synthetic_cloud(shape: str = "sphere", n: int = 20000, seed: int = 0,
                    extent: float = 1.0) -> RawPointCloud:
    """Smooth colored surface sample; positions span roughly ``extent`` source units."""
    rng = np.random.default_rng(seed)
    if shape == "sphere":
        v = rng.normal(size=(n, 3))
        p = 0.5 * v / np.linalg.norm(v, axis=1, keepdims=True)
    elif shape == "torus":
        u, w = rng.uniform(0, 2 * np.pi, (2, n))
        big, small = 0.35, 0.15
        p = np.column_stack([(big + small * np.cos(w)) * np.cos(u),
                             (big + small * np.cos(w)) * np.sin(u),
                             small * np.sin(w)])
    elif shape == "wave":
        xy = rng.uniform(-0.5, 0.5, (n, 2))
        z = 0.12 * np.sin(3 * np.pi * xy[:, 0]) * np.cos(2 * np.pi * xy[:, 1])
        p = np.column_stack([xy, z])
    else:
        raise ConfigError(f"unknown synthetic shape {shape!r}")
    p = p * extent
    phase = rng.uniform(0, 2 * np.pi, 3)
    q = p / extent
    colors = np.column_stack([
        127.5 + 120 * np.sin(6 * q[:, 0] + phase[0]),
        127.5 + 120 * np.sin(5 * q[:, 1] + 4 * q[:, 2] + phase[1]),
        127.5 + 120 * np.cos(7 * q[:, 2] - 3 * q[:, 0] + phase[2]),
    ])
    return RawPointCloud(p, np.rint(colors).astype(np.uint8))
