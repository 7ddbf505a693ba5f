"""Diagonal Fisher estimation and the quadratic consolidation penalty.

The Fisher diagonal is the empirical variant: the mean over examples of
the squared per-example gradient of the classification loss at the true
label. Anchors pair a Fisher vector with a parameter snapshot; when the
classifier head later grows, coordinates that did not exist at anchor
time simply carry no penalty (the anchor has no information about them),
so penalties compare only the anchor-length prefix of theta.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError

logger = logging.getLogger(__name__)


@dataclass
class FisherAnchor:
    fisher: np.ndarray      # nonnegative, length d at anchor time
    anchor: np.ndarray      # parameter snapshot, same length
    sample_count: int
    task_id: int

    def __post_init__(self):
        self.fisher = np.asarray(self.fisher, dtype=np.float64).ravel()
        self.anchor = np.asarray(self.anchor, dtype=np.float64).ravel()
        if self.fisher.shape != self.anchor.shape:
            raise ContractError("fisher and anchor must share a length")
        if (self.fisher < 0).any():
            raise ContractError("fisher entries must be nonnegative")

    def summary(self):
        f = self.fisher
        return {
            "task_id": self.task_id,
            "dim": int(f.size),
            "sample_count": int(self.sample_count),
            "min": float(f.min()),
            "mean": float(f.mean()),
            "max": float(f.max()),
            "sparsity": float((f < 1e-12).mean()),
        }


@dataclass
class AnchorSet:
    mode: str = "sum_over_tasks"      # or "latest_only"
    anchors: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("sum_over_tasks", "latest_only"):
            raise ContractError(f"unknown anchor mode {self.mode!r}")

    def add(self, anchor):
        if self.mode == "latest_only":
            self.anchors = [anchor]
        else:
            self.anchors.append(anchor)

    def __len__(self):
        return len(self.anchors)

    def __iter__(self):
        return iter(self.anchors)


def fisher_from_gradients(grads):
    """Mean of elementwise squared gradients over a stack of gradients."""
    grads = np.asarray(grads, dtype=np.float64)
    return (grads * grads).mean(axis=0)


def estimate_fisher(state, dataset, samples_per_class, rng, task_id=0):
    """Empirical diagonal Fisher of the classification loss on a dataset.

    Selects up to samples_per_class examples per class (seeded, without
    replacement), accumulates squared per-example loss gradients, and
    snapshots the current parameters as the anchor point.
    """
    picked = []
    for c in dataset.class_set:
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < samples_per_class:
            logger.warning("class %s has %d examples (< %d requested); using all",
                           c, len(idx), samples_per_class)
            picked.extend(idx)
        else:
            picked.extend(rng.choice(idx, size=samples_per_class, replace=False))
    picked = np.sort(np.asarray(picked, dtype=np.int64))
    fisher = np.zeros(state.num_params())
    rows = state.rows_for(dataset.labels[picked])
    for i, ex in enumerate(picked):
        _, grad = state.loss_and_grad(dataset.images[ex:ex + 1], rows[i:i + 1])
        fisher += grad * grad
    fisher /= len(picked)
    return FisherAnchor(fisher=fisher, anchor=state.flat_params(),
                        sample_count=len(picked), task_id=task_id)


def rebase_anchor(anchor, theta):
    """Same Fisher, new parameter snapshot (Alg-style post-task anchoring)."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.size < anchor.fisher.size:
        raise ContractError("new snapshot is shorter than the anchor's fisher")
    return replace(anchor, anchor=theta[: anchor.fisher.size].copy())


def _check_dims(theta, anchor):
    if theta.size < anchor.fisher.size:
        raise ContractError(
            f"theta has {theta.size} entries but an anchor expects at least "
            f"{anchor.fisher.size}; shrinking is not head expansion")


def ewc_penalty(theta, anchors):
    """Sum over anchors of sum_i F_i (theta_i - theta*_i)^2."""
    theta = np.asarray(theta, dtype=np.float64).ravel()
    total = 0.0
    for anchor in anchors:
        _check_dims(theta, anchor)
        d = anchor.fisher.size
        delta = theta[:d] - anchor.anchor
        total += float(np.dot(anchor.fisher, delta * delta))
    return total


def ewc_gradient(theta, anchors):
    """Analytic gradient of :func:`ewc_penalty`: 2 F (theta - theta*)."""
    theta = np.asarray(theta, dtype=np.float64).ravel()
    grad = np.zeros_like(theta)
    for anchor in anchors:
        _check_dims(theta, anchor)
        d = anchor.fisher.size
        grad[:d] += 2.0 * anchor.fisher * (theta[:d] - anchor.anchor)
    return grad
