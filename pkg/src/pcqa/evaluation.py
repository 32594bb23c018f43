"""Correlation statistics, VQEG logistic mapping, split protocol and the classic p2p baseline."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import kendalltau, rankdata

from .errors import ConfigError, DegenerateTarget, DegenerateVariance, NonConverged, ShapeError
from .features import FeatureField, FeatureKind
from .knn import NeighborIndex

VAR_EPS = 1e-12


@dataclass(frozen=True)
class LogisticParams:
    beta1: float
    beta2: float
    beta3: float
    beta4: float
    converged: bool = True

    def __call__(self, s):
        return logistic(np.asarray(s, dtype=np.float64), self.as_array())

    def as_array(self) -> np.ndarray:
        return np.array([self.beta1, self.beta2, self.beta3, self.beta4])


@dataclass(frozen=True)
class EvalReport:
    plcc: float
    srocc: float
    krocc: float
    rmse: float
    n: int
    logistic: LogisticParams | None


@dataclass(frozen=True)
class SplitPlan:
    rounds: list
    ratio: float
    seed: int


def _pair(x, y, min_len=2):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(x) != len(y):
        raise ShapeError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < min_len:
        raise ShapeError(f"need at least {min_len} samples")
    return x, y


def _degenerate(msg):
    warnings.warn(msg, DegenerateVariance, stacklevel=3)
    return 0.0


def plcc(x, y) -> float:
    x, y = _pair(x, y)
    xc, yc = x - x.mean(), y - y.mean()
    if np.mean(xc * xc) < VAR_EPS or np.mean(yc * yc) < VAR_EPS:
        return _degenerate("PLCC on a constant vector")
    r = np.sum(xc * yc) / math.sqrt(np.sum(xc * xc) * np.sum(yc * yc))
    return float(np.clip(r, -1.0, 1.0))


def srocc(x, y) -> float:
    """Spearman correlation: Pearson on average ranks."""
    x, y = _pair(x, y)
    return plcc(rankdata(x), rankdata(y))


def krocc(x, y) -> float:
    """Kendall tau-b."""
    x, y = _pair(x, y)
    if np.all(x == x[0]) or np.all(y == y[0]):
        return _degenerate("KROCC with all values tied")
    return float(kendalltau(x, y, variant="b").statistic)


def rmse(x, y) -> float:
    x, y = _pair(x, y, min_len=1)
    return float(math.sqrt(np.mean((x - y) ** 2)))


def logistic(s, beta):
    b1, b2, b3, b4 = beta
    z = np.clip(-(s - b3) / abs(b4), -700.0, 700.0)
    return b2 + (b1 - b2) / (1.0 + np.exp(z))


def _logistic_jacobian(s, beta):
    b1, b2, b3, b4 = beta
    a = abs(b4)
    z = np.clip(-(s - b3) / a, -700.0, 700.0)
    sig = 1.0 / (1.0 + np.exp(z))
    dsig = sig * (1.0 - sig)
    J = np.empty((len(s), 4))
    J[:, 0] = sig
    J[:, 1] = 1.0 - sig
    J[:, 2] = -(b1 - b2) * dsig / a
    J[:, 3] = -(b1 - b2) * dsig * (s - b3) / (a * a) * np.sign(b4 if b4 != 0 else 1.0)
    return J


def fit_logistic(pred, mos, max_iter: int = 200, damping: float = 1e-3, tol: float = 1e-10) -> LogisticParams:
    """Four-parameter monotone logistic fitted by Levenberg-Marquardt.

    Steps that do not lower the residual are rejected, so the result is never
    worse than the initial guess. Hitting ``max_iter`` returns the best
    parameters with ``converged=False`` and a NonConverged warning.
    """
    s, q = _pair(pred, mos)
    if len(s) < 5:
        raise ShapeError("logistic fit needs at least 5 samples")
    if np.all(q == q[0]):
        raise DegenerateTarget("MOS values are all equal")
    spread = float(np.std(s)) / 4.0
    beta = np.array([q.max(), q.min(), float(np.median(s)), spread if spread > 0 else 1.0])
    resid = q - logistic(s, beta)
    sse = float(resid @ resid)
    mu = damping
    converged = False
    for _ in range(max_iter):
        J = _logistic_jacobian(s, beta)
        JtJ = J.T @ J
        g = J.T @ resid
        improved = False
        while mu < 1e16:
            A = JtJ + mu * np.diag(np.maximum(np.diag(JtJ), 1e-12))
            try:
                step = np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            trial = beta + step
            if trial[3] == 0:
                trial[3] = 1e-12
            r_new = q - logistic(s, trial)
            sse_new = float(r_new @ r_new)
            if np.isfinite(sse_new) and sse_new <= sse:
                improved = True
                break
            mu *= 10.0
        if not improved:
            converged = True
            break
        change = (sse - sse_new) / max(sse, 1e-300)
        beta, resid, sse = trial, r_new, sse_new
        mu = max(mu / 10.0, 1e-15)
        if change < tol:
            converged = True
            break
    if not converged:
        warnings.warn("logistic fit hit the iteration cap", NonConverged, stacklevel=2)
    return LogisticParams(*(float(b) for b in beta), converged=converged)


def evaluate(pred, mos, fit: bool = True) -> EvalReport:
    """Rank statistics on raw scores, PLCC/RMSE after the fitted logistic map.

    With ``fit=False`` PLCC and RMSE use the raw scores and ``logistic`` is None;
    this is the only option for fewer than five samples.
    """
    s, q = _pair(pred, mos)
    if not fit:
        return EvalReport(plcc(s, q), srocc(s, q), krocc(s, q), rmse(s, q), len(s), None)
    if len(s) < 5:
        raise ShapeError("evaluation with a logistic fit needs at least 5 samples")
    params = fit_logistic(s, q)
    mapped = params(s)
    return EvalReport(plcc(mapped, q), srocc(s, q), krocc(s, q), rmse(mapped, q), len(s), params)


def shuffle_split(n: int, ratio: float = 0.6, rounds: int = 5, seed: int = 0) -> SplitPlan:
    if n < 5:
        raise ShapeError("shuffle split needs at least 5 samples")
    n_train = int(math.floor(ratio * n + 0.5))
    plan = []
    for r in range(rounds):
        perm = np.random.default_rng([seed, r]).permutation(n)
        plan.append((np.sort(perm[:n_train]), np.sort(perm[n_train:])))
    return SplitPlan(plan, ratio, seed)


def normalize_mos(scores, lo: float, hi: float) -> np.ndarray:
    if not hi > lo:
        raise ConfigError(f"mos_hi ({hi}) must exceed mos_lo ({lo})")
    s = np.asarray(scores, dtype=np.float64)
    return np.clip((s - lo) / (hi - lo), 0.0, 1.0)


GEOMETRY = "Geometry"


def _directed(src_pos, src_val, dst_pos, dst_val):
    nn, _ = NeighborIndex(dst_pos).query(src_pos, 1)
    diff = src_val - dst_val[nn[:, 0]]
    return float(np.mean(np.linalg.norm(diff, axis=1)))


def classic_p2p(original: FeatureField, distorted: FeatureField, feature=GEOMETRY) -> float:
    """Symmetric nearest-neighbour distortion: max of the two directed mean L2 errors."""
    po, pd = original.cloud.positions, distorted.cloud.positions
    if feature == GEOMETRY:
        vo, vd = po, pd
    else:
        kind = feature if isinstance(feature, FeatureKind) else FeatureKind.parse(feature)
        vo, vd = original[kind][:, None], distorted[kind][:, None]
    return max(_directed(po, vo, pd, vd), _directed(pd, vd, po, vo))
