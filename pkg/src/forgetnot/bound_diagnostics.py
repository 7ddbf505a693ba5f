"""Forgetting-bound diagnostics: replay divergence, parameter drift,
and the regression of observed forgetting on both terms.

The divergence estimator is the Wang-Kulkarni-Verdu k-NN estimator,
computed in the classifier's penultimate feature space (pixel-space k-NN
divergence is vacuous in high dimension). Drift reuses the consolidation
penalty with a single anchor, so the two modules agree by construction.
"""

from dataclasses import dataclass

import numpy as np

from . import ewc, kernels
from .errors import ContractError

_DIST_FLOOR = 1e-12


@dataclass
class BoundTerms:
    task_id: int
    kl_estimate: float
    drift: float
    observed_forgetting: float
    replay_weight: float = None     # |generated_j| / |data seen|, reported only

    def row(self):
        return [self.task_id, self.kl_estimate, self.drift,
                self.observed_forgetting, self.replay_weight]


@dataclass
class RegressionFit:
    a: float
    b: float
    intercept: float
    r2_joint: float
    r2_kl_only: float
    r2_drift_only: float
    n: int
    degenerate: bool = False

    def to_dict(self):
        return self.__dict__.copy()


@dataclass
class BoundSurface:
    delta: np.ndarray
    lam: np.ndarray
    values: np.ndarray              # [len(delta), len(lam)]


def estimate_kl(real_features, replay_features, k=5):
    """k-NN divergence estimate D(real || replay) in nats, clamped at 0."""
    real = np.ascontiguousarray(real_features, dtype=np.float64)
    replay = np.ascontiguousarray(replay_features, dtype=np.float64)
    if real.ndim != 2 or replay.ndim != 2 or real.shape[1] != replay.shape[1]:
        raise ContractError("feature matrices must be [n, d] with matching d")
    n, d = real.shape
    m = replay.shape[0]
    if k < 1 or n <= k or m <= k:
        raise ContractError(f"need more than k={k} points in both sets")
    rho = kernels.knn_kth_distance(real, real, k, exclude_self=True)
    nu = kernels.knn_kth_distance(real, replay, k, exclude_self=False)
    rho = np.maximum(rho, _DIST_FLOOR)
    nu = np.maximum(nu, _DIST_FLOOR)
    est = (d / n) * np.log(nu / rho).sum() + np.log(m / (n - 1))
    return float(max(est, 0.0))


def fisher_drift(theta_final, anchor):
    """Fisher-weighted squared drift from one anchor (penalty with one term)."""
    return ewc.ewc_penalty(theta_final, [anchor])


def _ols(design, y):
    """Least-squares fit with intercept; returns (coefs, r2)."""
    a = np.column_stack([np.ones(len(y))] + design)
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    resid = y - a @ coef
    sst = float(((y - y.mean()) ** 2).sum())
    if sst == 0.0:
        return coef, 0.0
    return coef, 1.0 - float((resid ** 2).sum()) / sst


def fit_regression(terms):
    """OLS of observed forgetting on (kl, drift), with single-term fits."""
    usable = [t for t in terms if t.kl_estimate is not None and t.drift is not None]
    if len(usable) < 3:
        raise ContractError("regression needs at least 3 observations")
    kl = np.asarray([t.kl_estimate for t in usable], dtype=np.float64)
    drift = np.asarray([t.drift for t in usable], dtype=np.float64)
    y = np.asarray([t.observed_forgetting for t in usable], dtype=np.float64)
    design = np.column_stack([np.ones_like(y), kl, drift])
    if np.linalg.matrix_rank(design) < 3:
        return RegressionFit(a=float("nan"), b=float("nan"), intercept=float("nan"),
                             r2_joint=0.0, r2_kl_only=0.0, r2_drift_only=0.0,
                             n=len(y), degenerate=True)
    coef, r2_joint = _ols([kl, drift], y)
    _, r2_kl = _ols([kl], y)
    _, r2_drift = _ols([drift], y)
    return RegressionFit(a=float(coef[1]), b=float(coef[2]), intercept=float(coef[0]),
                         r2_joint=r2_joint, r2_kl_only=r2_kl, r2_drift_only=r2_drift,
                         n=len(y))


def pinsker_gap_check(losses_real, losses_replay, loss_max, kl):
    """Monitor: is |E_real - E_replay| within loss_max * sqrt(kl/2) + CI slack?

    Losses are clipped to [0, loss_max]; the slack is a two-sided 99%
    normal interval on the difference of means, so the check tolerates
    sampling noise without asserting anything about the true divergence.
    """
    lr = np.asarray(losses_real, dtype=np.float64).ravel()
    lp = np.asarray(losses_replay, dtype=np.float64).ravel()
    if lr.size == 0 or lp.size == 0:
        raise ContractError("pinsker check needs nonempty loss samples")
    lr = np.clip(lr, 0.0, loss_max)
    lp = np.clip(lp, 0.0, loss_max)
    gap = abs(float(lr.mean()) - float(lp.mean()))
    z99 = 2.5758293035489004
    slack = z99 * np.sqrt(lr.var(ddof=1) / lr.size + lp.var(ddof=1) / lp.size) \
        if min(lr.size, lp.size) > 1 else 0.0
    bound = loss_max * np.sqrt(max(kl, 0.0) / 2.0)
    return bool(gap <= bound + slack)


def bound_surface(alpha, beta, delta_grid, lambda_grid):
    """Elementwise alpha*delta + beta/lambda over the grid."""
    delta = np.asarray(delta_grid, dtype=np.float64).ravel()
    lam = np.asarray(lambda_grid, dtype=np.float64).ravel()
    if (lam == 0).any():
        raise ContractError("lambda grid must not contain 0")
    if (delta < 0).any() or (lam < 0).any():
        raise ContractError("grids must be nonnegative")
    values = alpha * delta[:, None] + beta / lam[None, :]
    return BoundSurface(delta=delta, lam=lam, values=values)


def features_with_labels(features, labels, num_classes, scale=None):
    """Append one-hot labels (scaled by the mean feature norm) to features.

    This pools the joint (x, y) information into one metric space for the
    k-NN divergence; the scale keeps label coordinates commensurate with
    feature coordinates.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if scale is None:
        scale = float(np.linalg.norm(features, axis=1).mean())
    onehot = np.zeros((features.shape[0], num_classes))
    onehot[np.arange(labels.size), labels] = scale
    return np.concatenate([features, onehot], axis=1), scale
