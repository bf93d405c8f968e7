"""Classifier performance, model agreement, method ranking and the
Friedman / Nemenyi comparison."""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps
from sklearn.metrics import accuracy_score, precision_score, recall_score, roc_auc_score

from .metrics import ORIENTATION, SIMILARITY

# studentized range quantiles at infinite dof divided by sqrt(2), k = 2..10
Q_TABLE = {
    0.05: (1.959964, 2.343701, 2.569032, 2.727774, 2.849705, 2.948320, 3.030878, 3.101730, 3.163684),
    0.10: (1.644854, 2.052293, 2.291341, 2.459516, 2.588521, 2.692732, 2.779884, 2.854606, 2.919889),
}
PUBLISHED_CD_K8_N10 = 2.949


def performance_metrics(probabilities, labels, threshold: float = 0.5) -> dict:
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary 0/1")
    pred = (p >= threshold).astype(int)
    out = {
        "accuracy": float(accuracy_score(y, pred)),
        "precision": float(precision_score(y, pred, zero_division=0)),
        "recall": float(recall_score(y, pred, zero_division=0)),
    }
    out["auc"] = float(roc_auc_score(y, p)) if len(np.unique(y)) == 2 else float("nan")
    return out


def model_agreement(probabilities_a, probabilities_b, threshold: float = 0.5) -> dict:
    """Model A's hard labels are treated as the ground truth for model B."""
    a = np.asarray(probabilities_a, dtype=np.float64)
    return performance_metrics(probabilities_b, (a >= threshold).astype(int), threshold)


# ---------------------------------------------------------------------------

@dataclass
class ScoreTable:
    methods: list
    columns: list
    values: np.ndarray                      # (k methods, N columns)
    orientations: list = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.orientations is None:
            self.orientations = [ORIENTATION.get(str(c), SIMILARITY) for c in self.columns]
        if self.values.shape != (len(self.methods), len(self.columns)):
            raise ValueError(f"values shape {self.values.shape} does not match "
                             f"{len(self.methods)} methods x {len(self.columns)} columns")


@dataclass
class RankTable:
    methods: list
    columns: list
    ranks: np.ndarray
    dropped: list = field(default_factory=list)

    @property
    def average_rank(self) -> np.ndarray:
        return self.ranks.mean(axis=1)

    @property
    def k(self) -> int:
        return self.ranks.shape[0]

    @property
    def n(self) -> int:
        return self.ranks.shape[1]


def rank_methods(scores: ScoreTable) -> RankTable:
    """Rank 1 is the largest overlap: similarity columns descend,
    dissimilarity columns ascend; ties get midranks. Columns with a missing
    value are dropped."""
    keep, dropped = [], []
    for j, col in enumerate(scores.columns):
        (dropped if np.isnan(scores.values[:, j]).any() else keep).append(j)
    if dropped:
        warnings.warn(f"dropping columns with missing values: {[scores.columns[j] for j in dropped]}")
    ranks = np.empty((len(scores.methods), len(keep)))
    for out, j in enumerate(keep):
        v = scores.values[:, j]
        ranks[:, out] = sps.rankdata(-v if scores.orientations[j] == SIMILARITY else v, method="average")
    return RankTable(list(scores.methods), [scores.columns[j] for j in keep], ranks,
                     [scores.columns[j] for j in dropped])


@dataclass
class FriedmanResult:
    chi_square: float
    f_statistic: float
    df1: int
    df2: int
    p_value: float
    k: int
    n: int


def friedman_test(ranks) -> FriedmanResult:
    R = ranks.ranks if isinstance(ranks, RankTable) else np.asarray(ranks, dtype=np.float64)
    k, n = R.shape
    if k < 2 or n < 2:
        raise ValueError(f"need at least 2 methods and 2 columns, got {k}x{n}")
    rbar = R.mean(axis=1)
    chi2 = 12 * n / (k * (k + 1)) * (np.sum(rbar ** 2) - k * (k + 1) ** 2 / 4)
    chi2 = max(float(chi2), 0.0)
    df1, df2 = k - 1, (k - 1) * (n - 1)
    denom = n * (k - 1) - chi2
    if denom <= 0:
        return FriedmanResult(chi2, float("inf"), df1, df2, 0.0, k, n)
    f = (n - 1) * chi2 / denom
    return FriedmanResult(chi2, float(f), df1, df2, float(sps.f.sf(f, df1, df2)), k, n)


@dataclass
class NemenyiResult:
    alpha: float
    q_critical: float
    cd: float
    significant_pairs: list = field(default_factory=list)


def nemenyi_cd(k: int, n: int, alpha: float = 0.05, ranks: RankTable | None = None) -> NemenyiResult:
    """Critical difference of average ranks; with a rank table, also the
    method pairs whose average ranks differ by more than it."""
    if alpha not in Q_TABLE:
        raise ValueError(f"alpha must be one of {sorted(Q_TABLE)}")
    if not 2 <= k <= 10:
        raise ValueError(f"q table covers 2 <= k <= 10, got k={k}")
    if n < 1:
        raise ValueError("n must be >= 1")
    q = Q_TABLE[alpha][k - 2]
    cd = q * np.sqrt(k * (k + 1) / (6 * n))
    pairs = []
    if ranks is not None:
        avg = ranks.average_rank
        for i, j in itertools.combinations(range(len(avg)), 2):
            if abs(avg[i] - avg[j]) > cd:
                pairs.append((ranks.methods[i], ranks.methods[j], float(avg[i] - avg[j])))
    return NemenyiResult(alpha, q, float(cd), pairs)
