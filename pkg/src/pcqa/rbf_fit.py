"""Local RBF implicit functions around reference points.

Each reference point gets, per scale cloud and per feature channel, an
interpolant

    f(p) = a*x + b*y + c*z + d + sum_n omega_n * phi(|p - p_n|)

over its 30 nearest neighbours, with the omega orthogonal to the affine
polynomial space. The 34 numbers (omega_1..omega_30, a, b, c, d) are the
coefficients compared between original and distorted clouds.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .cloud_io import NormalizedCloud
from .errors import EmptyTensor, InsufficientDensity, ReferenceMismatch, SingularPatch
from .features import ALL_FEATURES, FeatureField, FeatureKind
from .knn import NeighborIndex, unique_first
from .multiscale import ScaleSet, voxel_downsample

PATCH_SIZE = 30
POLY_TERMS = 4
REF_VOXEL = 16.0
REF_MAX_COUNT = 4096
TIKHONOV = 1e-12
_COPLANAR_TOL = 1e-9
_CHUNK = 512


class CloudRole(Enum):
    Original = "O"
    Distorted = "D"


@dataclass(frozen=True, eq=False)
class ReferenceSet:
    points: np.ndarray

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class NeighborPatch:
    reference: np.ndarray
    positions: np.ndarray  # (n, 3), ascending distance to reference
    values: dict  # FeatureKind -> (n,)
    indices: np.ndarray  # neighbour indices into the de-duplicated source cloud
    scale: float | None = None
    role: CloudRole | None = None


@dataclass(frozen=True, eq=False)
class RbfCoefficients:
    omega: np.ndarray
    a: float
    b: float
    c: float
    d: float

    @classmethod
    def from_vector(cls, w) -> "RbfCoefficients":
        w = np.asarray(w, dtype=np.float64)
        return cls(w[:-4].copy(), float(w[-4]), float(w[-3]), float(w[-2]), float(w[-1]))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, [self.a, self.b, self.c, self.d]])


@dataclass(frozen=True, eq=False)
class CoefficientTensor:
    """Coefficients indexed by (kept reference, scale, feature, k)."""

    refs: ReferenceSet
    ref_ids: np.ndarray  # indices into refs.points that survived
    coeffs: np.ndarray  # (len(ref_ids), n_scales, n_features, n + 4)
    scales: tuple
    features: tuple
    dropped: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def restrict(self, ref_ids) -> "CoefficientTensor":
        ref_ids = np.asarray(ref_ids, dtype=np.int64)
        pos = np.searchsorted(self.ref_ids, ref_ids)
        if np.any(pos >= len(self.ref_ids)) or np.any(self.ref_ids[np.minimum(pos, len(self.ref_ids) - 1)] != ref_ids):
            raise ReferenceMismatch("requested reference ids are not all present")
        extra = np.setdiff1d(self.ref_ids, ref_ids)
        return CoefficientTensor(
            self.refs, ref_ids, self.coeffs[pos], self.scales, self.features,
            np.union1d(self.dropped, extra),
        )

    def record(self, t: int, scale_idx: int, feature_idx: int) -> RbfCoefficients:
        return RbfCoefficients.from_vector(self.coeffs[t, scale_idx, feature_idx])


def rbf_kernel(r):
    """Biharmonic kernel phi(r) = r."""
    return r


def select_reference_points(
    original: NormalizedCloud,
    voxel: float = REF_VOXEL,
    max_count: int = REF_MAX_COUNT,
    seed: int = 0,
) -> ReferenceSet:
    points = voxel_downsample(original, voxel).positions
    if len(points) > max_count:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(points), size=max_count, replace=False))
        points = points[keep]
    return ReferenceSet(np.array(points))


class PatchSource:
    """A scale cloud prepared for repeated patch queries (duplicates collapsed)."""

    def __init__(self, cloud: NormalizedCloud, fields: FeatureField, features=ALL_FEATURES,
                 n: int = PATCH_SIZE):
        keep = unique_first(cloud.positions)
        if len(keep) < n:
            raise InsufficientDensity(f"need {n} distinct positions, cloud has {len(keep)}")
        self.n = n
        self.features = tuple(features)
        self.positions = cloud.positions[keep]
        self.values = fields.stack(self.features)[keep]
        self.index = NeighborIndex(self.positions)

    def gather(self, refs: np.ndarray, workers: int = 1):
        idx, _ = self.index.query(refs, self.n, workers=workers)
        return idx, self.positions[idx], self.values[idx]


def knn_patch(cloud: NormalizedCloud, fields: FeatureField, ref, n: int = PATCH_SIZE,
              scale: float | None = None, role: CloudRole | None = None) -> NeighborPatch:
    src = PatchSource(cloud, fields, ALL_FEATURES, n)
    ref = np.asarray(ref, dtype=np.float64)
    idx, pos, val = src.gather(ref[None, :])
    values = {k: val[0, :, j] for j, k in enumerate(ALL_FEATURES)}
    return NeighborPatch(ref, pos[0], values, idx[0], scale, role)


def assemble_system(patch: NeighborPatch, feature: FeatureKind):
    """Saddle-point system X w = Y laid out with kernel block, then x, y, z, 1 columns."""
    p = patch.positions
    n = len(p)
    X = np.zeros((n + POLY_TERMS, n + POLY_TERMS))
    X[:n, :n] = rbf_kernel(np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1))
    X[:n, n : n + 3] = p
    X[:n, n + 3] = 1.0
    X[n:, :n] = X[:n, n:].T
    Y = np.zeros(n + POLY_TERMS)
    Y[:n] = patch.values[feature]
    return X, Y


def regularization(kernel_block: np.ndarray) -> np.ndarray:
    """Tikhonov weight per system: 1e-12 times the mean row 2-norm of the kernel block."""
    return TIKHONOV * np.sqrt(np.einsum("...ij,...ij->...i", kernel_block, kernel_block)).mean(axis=-1)


def solve_patches(positions: np.ndarray, values: np.ndarray):
    """Batched solve for ``positions`` (M, n, 3) and ``values`` (M, n, F).

    Returns ``(coeffs, singular)`` where ``coeffs`` is (M, F, n + 4) in the
    uncentred coordinate frame and ``singular`` flags systems that could not be
    solved. The system is solved with coordinates centred on the patch mean,
    which leaves omega unchanged and only shifts d.
    """
    M, n, _ = positions.shape
    F = values.shape[2]
    center = positions.mean(axis=1)
    local = positions - center[:, None, :]

    delta = local[:, :, None, :] - local[:, None, :, :]
    kernel = rbf_kernel(np.sqrt(np.einsum("mijk,mijk->mij", delta, delta)))
    lam = regularization(kernel)
    A = np.zeros((M, n + POLY_TERMS, n + POLY_TERMS))
    A[:, :n, :n] = kernel
    A[:, np.arange(n), np.arange(n)] += lam[:, None]
    A[:, :n, n : n + 3] = local
    A[:, :n, n + 3] = 1.0
    A[:, n:, :n] = np.swapaxes(A[:, :n, n:], 1, 2)
    rhs = np.zeros((M, n + POLY_TERMS, F))
    rhs[:, :n, :] = values

    # coplanar or collinear neighbourhoods make the polynomial block rank deficient
    sv = np.linalg.svd(local, compute_uv=False)
    singular = sv[:, -1] <= _COPLANAR_TOL * np.maximum(sv[:, 0], 1e-300)

    sol = np.zeros((M, n + POLY_TERMS, F))
    ok = np.nonzero(~singular)[0]
    if len(ok):
        try:
            sol[ok] = np.linalg.solve(A[ok], rhs[ok])
        except np.linalg.LinAlgError:
            for i in ok:
                try:
                    sol[i] = np.linalg.solve(A[i], rhs[i])
                except np.linalg.LinAlgError:
                    singular[i] = True
    singular |= ~np.all(np.isfinite(sol), axis=(1, 2))
    sol[singular] = 0.0

    coeffs = np.swapaxes(sol, 1, 2).copy()
    # shift the constant term back to the uncentred frame
    coeffs[:, :, n + 3] -= np.einsum("mfi,mi->mf", coeffs[:, :, n : n + 3], center)
    return coeffs, singular


def solve_rbf(patch: NeighborPatch, feature: FeatureKind) -> RbfCoefficients:
    values = np.asarray(patch.values[feature], dtype=np.float64)
    coeffs, singular = solve_patches(patch.positions[None], values[None, :, None])
    if singular[0]:
        raise SingularPatch("RBF system is singular for this patch")
    return RbfCoefficients.from_vector(coeffs[0, 0])


def evaluate_rbf(coeffs: RbfCoefficients, patch: NeighborPatch, query) -> float:
    q = np.asarray(query, dtype=np.float64)
    r = np.linalg.norm(patch.positions - q, axis=1)
    poly = coeffs.a * q[0] + coeffs.b * q[1] + coeffs.c * q[2] + coeffs.d
    return float(poly + np.dot(coeffs.omega, rbf_kernel(r)))


def _fit_source(src: PatchSource, refs: np.ndarray, workers: int):
    M = len(refs)
    out = np.empty((M, len(src.features), src.n + POLY_TERMS))
    singular = np.zeros(M, dtype=bool)
    chunks = [slice(i, min(i + _CHUNK, M)) for i in range(0, M, _CHUNK)]

    def run(sl):
        _, pos, val = src.gather(refs[sl])
        out[sl], singular[sl] = solve_patches(pos, val)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, chunks))
    else:
        for sl in chunks:
            run(sl)
    return out, singular


def fit_coefficient_tensor(
    scaleset: ScaleSet,
    fields,
    refs: ReferenceSet,
    features=ALL_FEATURES,
    n: int = PATCH_SIZE,
    workers: int = 1,
) -> CoefficientTensor:
    """Fit every (reference, scale, feature) interpolant.

    Reference points whose patch is singular at any scale are dropped and
    listed in ``dropped``; the caller must intersect the survivors of both
    clouds before differencing.
    """
    features = tuple(features)
    M = refs.count
    coeffs = np.empty((M, len(scaleset), len(features), n + POLY_TERMS))
    singular = np.zeros(M, dtype=bool)
    for s, (cloud, fld) in enumerate(zip(scaleset.clouds, fields)):
        src = PatchSource(cloud, fld, features, n)
        coeffs[:, s], sing = _fit_source(src, refs.points, workers)
        singular |= sing
    kept = np.nonzero(~singular)[0]
    if len(kept) == 0:
        raise EmptyTensor("every reference point produced a singular patch")
    return CoefficientTensor(
        refs, kept, coeffs[kept], scaleset.voxel_sizes, features, np.nonzero(singular)[0]
    )


def align_tensors(t_orig: CoefficientTensor, t_dist: CoefficientTensor):
    """Restrict both tensors to reference points that survived in each."""
    if t_orig.refs.count != t_dist.refs.count or not np.array_equal(t_orig.refs.points, t_dist.refs.points):
        raise ReferenceMismatch("tensors were fitted on different reference sets")
    common = np.intersect1d(t_orig.ref_ids, t_dist.ref_ids)
    if len(common) == 0:
        raise EmptyTensor("no reference point survived in both clouds")
    return t_orig.restrict(common), t_dist.restrict(common)
