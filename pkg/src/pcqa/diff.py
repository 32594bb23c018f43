"""Coefficient differences between original and distorted tensors, plus preprocessing."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientData, ReferenceMismatch, ShapeError
from .features import ALL_FEATURES, FeatureKind
from .multiscale import DEFAULT_SCALES, scale_name
from .rbf_fit import CoefficientTensor

EPS = 1e-12
STD_FLOOR = 1e-8
K_COEFFS = 34


@dataclass(frozen=True)
class GroupKey:
    scale: float
    feature: FeatureKind

    @property
    def label(self) -> str:
        return f"{scale_name(self.scale)}_{self.feature.value}"


def group_keys(scales=DEFAULT_SCALES, features=ALL_FEATURES) -> list[GroupKey]:
    """Canonical group order: scale-major (H, M, L), then (Cu, Y, Cr)."""
    return [GroupKey(float(s), f) for s in scales for f in features]


def column_names(scales=DEFAULT_SCALES, features=ALL_FEATURES, k: int = K_COEFFS) -> list[str]:
    return [f"{g.label}_{i}" for g in group_keys(scales, features) for i in range(k)]


@dataclass(frozen=True, eq=False)
class FeatureDiffVector:
    groups: tuple  # GroupKey per row of ``values``
    values: np.ndarray  # (n_groups, K)

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def __getitem__(self, key: GroupKey) -> np.ndarray:
        return self.values[self.groups.index(key)]


def coeff_diff(w_orig, w_dist):
    """|w_O - w_D| / max(|w_O|, |w_D|), 0 where both magnitudes are below 1e-12."""
    a = np.asarray(w_orig, dtype=np.float64)
    b = np.asarray(w_dist, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(b))
    small = denom < EPS
    out = np.abs(a - b) / np.where(small, 1.0, denom)
    out = np.where(small, 0.0, out)
    return out if out.ndim else float(out)


def aggregate_diffs(t_orig: CoefficientTensor, t_dist: CoefficientTensor) -> FeatureDiffVector:
    """Mean over reference points of the per-coefficient relative differences."""
    if (
        not np.array_equal(t_orig.ref_ids, t_dist.ref_ids)
        or t_orig.coeffs.shape != t_dist.coeffs.shape
        or t_orig.scales != t_dist.scales
        or t_orig.features != t_dist.features
    ):
        raise ReferenceMismatch("coefficient tensors do not share a reference set and layout")
    d = coeff_diff(t_orig.coeffs, t_dist.coeffs).mean(axis=0)  # (S, F, K)
    keys = tuple(group_keys(t_orig.scales, t_orig.features))
    return FeatureDiffVector(keys, d.reshape(len(keys), -1))


def log_modulus(x):
    return np.sign(x) * np.log1p(np.abs(x))


@dataclass(frozen=True, eq=False)
class PreprocessStats:
    mean: np.ndarray
    std: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.mean)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.mean, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.std, dtype="<f8").tobytes())
        return h.hexdigest()


def fit_zscore(training) -> PreprocessStats:
    rows = np.atleast_2d(np.asarray(training, dtype=np.float64))
    if rows.shape[0] < 2:
        raise InsufficientData("z-score statistics need at least two training rows")
    t = log_modulus(rows)
    return PreprocessStats(t.mean(axis=0), np.maximum(t.std(axis=0), STD_FLOOR))


def apply_preprocess(v, stats: PreprocessStats) -> np.ndarray:
    x = np.asarray(v.flat if isinstance(v, FeatureDiffVector) else v, dtype=np.float64)
    if x.shape[-1] != stats.dim:
        raise ShapeError(f"vector width {x.shape[-1]} does not match stats width {stats.dim}")
    return (log_modulus(x) - stats.mean) / stats.std
