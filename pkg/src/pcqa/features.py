"""Per-point curvature, luma and chroma channels."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .cloud_io import NormalizedCloud
from .errors import InsufficientDensity
from .knn import NeighborIndex

DEFAULT_CURVATURE_K = 30

KR, KG, KB = 0.2126, 0.7152, 0.0722
CR_SCALE = 1.5748


class FeatureKind(Enum):
    Curvature = "Cu"
    Luma = "Y"
    Chroma = "Cr"

    @classmethod
    def parse(cls, token: str) -> "FeatureKind":
        for kind in cls:
            if token in (kind.value, kind.name):
                return kind
        raise ValueError(f"unknown feature {token!r}")


ALL_FEATURES = (FeatureKind.Curvature, FeatureKind.Luma, FeatureKind.Chroma)


@dataclass(frozen=True, eq=False)
class FeatureField:
    cloud: NormalizedCloud
    curvature: np.ndarray
    luma: np.ndarray
    chroma: np.ndarray

    def __getitem__(self, kind: FeatureKind) -> np.ndarray:
        return {
            FeatureKind.Curvature: self.curvature,
            FeatureKind.Luma: self.luma,
            FeatureKind.Chroma: self.chroma,
        }[kind]

    def stack(self, kinds=ALL_FEATURES) -> np.ndarray:
        """(N, len(kinds)) matrix of the requested channels."""
        return np.column_stack([self[k] for k in kinds])


def rgb_to_luma_chroma(color):
    """BT.709 full-range luma and Cr (no +128 offset). Works on arrays of RGB rows."""
    c = np.asarray(color, dtype=np.float64)
    r, g, b = c[..., 0], c[..., 1], c[..., 2]
    y = KR * r + KG * g + KB * b
    return y, (r - y) / CR_SCALE


def estimate_curvature(
    cloud: NormalizedCloud, k: int = DEFAULT_CURVATURE_K, workers: int = 1
) -> np.ndarray:
    """Surface variation lambda_min / (lambda_0 + lambda_1 + lambda_2) over k-NN (self included)."""
    if cloud.count <= k:
        raise InsufficientDensity(f"curvature needs more than {k} points, cloud has {cloud.count}")
    index = NeighborIndex(cloud.positions)
    nbr, _ = index.query(cloud.positions, k, workers=workers)
    return _surface_variation(cloud.positions[nbr])


def _surface_variation(patches: np.ndarray) -> np.ndarray:
    centered = patches - patches.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / patches.shape[1]
    eig = np.linalg.eigvalsh(cov)
    eig = np.clip(eig, 0.0, None)
    total = eig.sum(axis=1)
    out = np.zeros(len(patches))
    ok = total >= 1e-12
    out[ok] = eig[ok, 0] / total[ok]
    return out


def extract_features(
    cloud: NormalizedCloud, k: int = DEFAULT_CURVATURE_K, workers: int = 1
) -> FeatureField:
    curvature = estimate_curvature(cloud, k, workers=workers)
    luma, chroma = rgb_to_luma_chroma(cloud.colors)
    return FeatureField(cloud, curvature, luma, chroma)
