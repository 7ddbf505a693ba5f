"""Continual-learning metrics over the accuracy matrix, plus macro AUC.

The accuracy matrix stores A[j, t]: accuracy on task j evaluated after
training step t, for 1 <= j <= t <= K (lower-triangular by column). An
optional pre-task entry A[j, j-1] is stored when forward transfer is
measured; the forgetting max deliberately ignores it.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import ContractError


@dataclass
class AccuracyMatrix:
    K: int
    values: np.ndarray = None          # [K, K] with NaN where undefined

    def __post_init__(self):
        if self.values is None:
            self.values = np.full((self.K, self.K), np.nan)
        else:
            self.values = np.asarray(self.values, dtype=np.float64)
            if self.values.shape != (self.K, self.K):
                raise ContractError(f"matrix must be {self.K}x{self.K}")

    def set(self, j, t, acc):
        if not (0.0 <= acc <= 1.0):
            raise ContractError(f"accuracy {acc} outside [0, 1]")
        self.values[j - 1, t - 1] = acc

    def get(self, j, t):
        return float(self.values[j - 1, t - 1])

    def defined(self, j, t):
        return not math.isnan(self.values[j - 1, t - 1])

    def final_column(self):
        col = self.values[:, self.K - 1]
        if np.isnan(col).any():
            raise ContractError("final column is incomplete")
        return col.copy()

    def to_lists(self):
        return [[None if math.isnan(v) else float(v) for v in row] for row in self.values]

    @classmethod
    def from_lists(cls, rows):
        arr = np.asarray([[np.nan if v is None else v for v in row] for row in rows])
        return cls(K=arr.shape[0], values=arr)


def forgetting(matrix):
    """Mean and per-task forgetting: max_{j<=t<=K} A[j,t] - A[j,K].

    Returns (F, per_task) where per_task has length K; the mean runs over
    tasks 1..K-1 (the final task's own entry is reported but excluded).
    """
    K = matrix.K
    if K < 2:
        raise ContractError("forgetting needs at least two tasks")
    final = matrix.final_column()
    per_task = np.zeros(K)
    for j in range(1, K + 1):
        seen = [matrix.get(j, t) for t in range(j, K + 1) if matrix.defined(j, t)]
        per_task[j - 1] = max(seen) - final[j - 1]
    return float(per_task[: K - 1].mean()), per_task


def average_accuracy(matrix):
    """Mean of the final-column accuracies."""
    return float(matrix.final_column().mean())


def transfer(matrix, random_baseline):
    """(FWT, BWT) in the Lopez-Paz style.

    FWT averages A[j, j-1] - b_j over j = 2..K, where A[j, j-1] is the
    accuracy of the pre-task-j model and b_j the random-init baseline.
    BWT averages A[j, K] - A[j, j] over j = 1..K-1.
    """
    K = matrix.K
    if K < 2:
        raise ContractError("transfer needs at least two tasks")
    baseline = np.asarray(random_baseline, dtype=np.float64).ravel()
    if baseline.size != K:
        raise ContractError(f"random_baseline must have length {K}")
    fwt_terms = []
    for j in range(2, K + 1):
        if not matrix.defined(j, j - 1):
            raise ContractError(
                f"FWT needs the pre-task evaluation A[{j},{j - 1}]; "
                "run with --measure-fwt")
        fwt_terms.append(matrix.get(j, j - 1) - baseline[j - 1])
    bwt_terms = [matrix.get(j, K) - matrix.get(j, j) for j in range(1, K)]
    return float(np.mean(fwt_terms)), float(np.mean(bwt_terms))


def macro_auc(scores, labels, return_excluded=False):
    """One-vs-rest rank AUC per class (ties get half credit), macro-averaged.

    Classes without both a positive and a negative example are excluded
    from the average; their ids are available via return_excluded.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if scores.ndim != 2 or scores.shape[0] != labels.size:
        raise ContractError("scores must be [N, C] aligned with labels")
    aucs, excluded = [], []
    for c in range(scores.shape[1]):
        pos = labels == c
        n_pos = int(pos.sum())
        n_neg = labels.size - n_pos
        if n_pos == 0 or n_neg == 0:
            excluded.append(c)
            continue
        ranks = stats.rankdata(scores[:, c])
        auc = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
        aucs.append(auc)
    if not aucs:
        raise ContractError("no class has both positive and negative examples")
    result = float(np.mean(aucs))
    return (result, excluded) if return_excluded else result


@dataclass
class MetricReport:
    average_accuracy: float
    forgetting: float
    per_task_forgetting: list
    taskwise: dict                 # {"T1": ..., "Tmid": ..., "Tn": ...}
    macro_auc: float = None
    fwt: float = None
    bwt: float = None

    def to_dict(self):
        return {
            "average_accuracy": self.average_accuracy,
            "forgetting": self.forgetting,
            "per_task_forgetting": list(self.per_task_forgetting),
            "taskwise": self.taskwise,
            "macro_auc": self.macro_auc,
            "fwt": self.fwt,
            "bwt": self.bwt,
        }


def build_report(matrix, auc=None, random_baseline=None):
    """Assemble the standard report from an accuracy matrix."""
    K = matrix.K
    final = matrix.final_column()
    f_mean, f_per_task = forgetting(matrix)
    mid = math.ceil(K / 2)
    taskwise = {"T1": float(final[0]), "Tmid": float(final[mid - 1]), "Tn": float(final[-1])}
    fwt = bwt = None
    if random_baseline is not None:
        fwt, bwt = transfer(matrix, random_baseline)
    return MetricReport(
        average_accuracy=average_accuracy(matrix),
        forgetting=f_mean,
        per_task_forgetting=[float(v) for v in f_per_task],
        taskwise=taskwise,
        macro_auc=auc,
        fwt=fwt,
        bwt=bwt,
    )
