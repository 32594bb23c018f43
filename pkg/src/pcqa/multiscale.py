"""Voxel-grid downsampling into the High/Medium/Low scale ladder."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .cloud_io import NormalizedCloud
from .errors import InsufficientDensity

MIN_SCALE_POINTS = 30


class ScaleTag(Enum):
    High = 2.0
    Medium = 4.0
    Low = 8.0

    @property
    def voxel_size(self) -> float:
        return self.value


DEFAULT_SCALES = (2.0, 4.0, 8.0)
_SCALE_NAMES = {2.0: "H", 4.0: "M", 8.0: "L"}


def scale_name(voxel_size: float) -> str:
    return _SCALE_NAMES.get(float(voxel_size), f"v{voxel_size:g}")


@dataclass(frozen=True, eq=False)
class ScaleSet:
    voxel_sizes: tuple
    clouds: tuple

    def __iter__(self):
        return iter(zip(self.voxel_sizes, self.clouds))

    def __len__(self):
        return len(self.clouds)

    def __getitem__(self, i) -> NormalizedCloud:
        return self.clouds[i]


def voxel_keys(positions: np.ndarray, voxel_size: float) -> np.ndarray:
    return np.floor(positions / voxel_size).astype(np.int64)


def voxel_downsample(cloud: NormalizedCloud, voxel_size: float) -> NormalizedCloud:
    """One point per occupied voxel: member centroid and rounded mean color.

    Output is ordered by voxel index with z most significant. Members are
    summed in a canonical order (by coordinates, then color), so permuting the
    input gives a bit-identical result.
    """
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    pos = cloud.positions
    col = cloud.colors.astype(np.int64)
    keys = voxel_keys(pos, voxel_size)
    order = np.lexsort(
        (col[:, 2], col[:, 1], col[:, 0], pos[:, 0], pos[:, 1], pos[:, 2],
         keys[:, 0], keys[:, 1], keys[:, 2])
    )
    skeys = keys[order]
    starts = np.concatenate(([0], np.nonzero(np.any(np.diff(skeys, axis=0) != 0, axis=1))[0] + 1))
    counts = np.diff(np.append(starts, len(order)))

    spos = pos[order]
    sums = np.add.reduceat(spos, starts, axis=0)
    centroids = sums / counts[:, None]
    csum = np.add.reduceat(col[order], starts, axis=0)
    # round half up in exact integer arithmetic
    colors = (2 * csum + counts[:, None]) // (2 * counts[:, None])
    return NormalizedCloud(centroids, colors.astype(np.uint8), cloud.has_color)


def build_scale_set(cloud: NormalizedCloud, voxel_sizes=DEFAULT_SCALES) -> ScaleSet:
    clouds = []
    for size in voxel_sizes:
        down = voxel_downsample(cloud, size)
        if down.count < MIN_SCALE_POINTS:
            raise InsufficientDensity(
                f"voxel size {size:g} leaves {down.count} points (< {MIN_SCALE_POINTS})"
            )
        clouds.append(down)
    return ScaleSet(tuple(float(v) for v in voxel_sizes), tuple(clouds))
