"""Overlap metrics between a saliency map and a prototype attribution map.

The attribution map is always the ground-truth side: it is binarised for
the location metrics and normalised to a distribution for the
distribution metrics.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

SIMILARITY, DISSIMILARITY = "similarity", "dissimilarity"

ORIENTATION = {
    "jAUC": SIMILARITY, "bAUC": SIMILARITY, "sAUC": SIMILARITY, "NSS": SIMILARITY, "IG": SIMILARITY,
    "MAE": DISSIMILARITY, "MSE": DISSIMILARITY,
    "SIM": SIMILARITY, "CC": SIMILARITY, "KL": DISSIMILARITY,
}
METRICS = tuple(ORIENTATION)
LOCATION_METRICS = ("jAUC", "bAUC", "sAUC", "NSS", "IG", "MAE", "MSE")
DISTRIBUTION_METRICS = ("SIM", "CC", "KL")

_SUM_TOL = 1e-9


class MetricUndefined(ValueError):
    """Raised when a metric's precondition fails for a given pair."""


@dataclass
class MetricConfig:
    binarize_fraction: float = 0.2
    auc_thresholds: int = 256
    auc_repeats: int = 100
    negative_samples: int | None = None      # None: as many as fixations
    sauc_mode: str = "center"                # or "crossimage"
    sauc_sigma_fraction: float = 0.25
    epsilon: float = 2.2e-16
    ig_baseline: str = "uniform"             # or "center"
    signed_mode: str = "abs"                 # or "positive"
    mae_signed: bool = False
    seed: int = 0

    def validate(self) -> None:
        if not 0 < self.binarize_fraction < 1:
            raise ValueError("binarize_fraction must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.auc_thresholds < 2 or self.auc_repeats < 1:
            raise ValueError("need auc_thresholds >= 2 and auc_repeats >= 1")
        if self.sauc_mode not in ("center", "crossimage"):
            raise ValueError(f"unknown sauc_mode {self.sauc_mode!r}")
        if self.ig_baseline not in ("uniform", "center"):
            raise ValueError(f"unknown ig_baseline {self.ig_baseline!r}")
        if self.signed_mode not in ("abs", "positive"):
            raise ValueError(f"unknown signed_mode {self.signed_mode!r}")


@dataclass
class MetricResult:
    metric_id: str
    value: float
    orientation: str
    missing: bool = False
    reason: str = ""


# ---------------------------------------------------------------------------
# map preparation

def normalize_map(raw, mode: str = "minmax01", signed_mode: str = "abs") -> np.ndarray:
    v = np.asarray(getattr(raw, "values", raw), dtype=np.float64)
    if not np.isfinite(v).all():
        raise ValueError("map contains non-finite values")
    v = np.abs(v) if signed_mode == "abs" else np.maximum(v, 0.0)
    if mode == "minmax01":
        lo, hi = v.min(), v.max()
        if hi == lo:
            return np.full_like(v, 0.5)
        return (v - lo) / (hi - lo)
    if mode == "distribution":
        s = v.sum()
        if s <= 0:
            raise MetricUndefined("an all-zero map has no distribution")
        return v / s
    raise ValueError(f"unknown normalisation {mode!r}")


def binarize_gt(gt, fraction: float = 0.2) -> np.ndarray:
    """Top ceil(fraction * pixels) set to 1; ties at the cut go to the
    earlier pixel in row-major order."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    v = np.asarray(gt, dtype=np.float64)
    k = math.ceil(fraction * v.size)
    order = np.argsort(-v.ravel(), kind="stable")[:k]
    out = np.zeros(v.size, dtype=np.uint8)
    out[order] = 1
    return out.reshape(v.shape)


def center_prior(shape, sigma_fraction: float = 0.25) -> np.ndarray:
    h, w = shape
    r = np.arange(h) - (h - 1) / 2
    c = np.arange(w) - (w - 1) / 2
    g = np.exp(-(r[:, None] ** 2 / (2 * (sigma_fraction * h) ** 2) + c[None, :] ** 2 / (2 * (sigma_fraction * w) ** 2)))
    return g / g.sum()


def _fixations(Q) -> np.ndarray:
    q = np.asarray(Q).astype(bool)
    if not q.any():
        raise MetricUndefined("fixation map has no fixated pixels")
    return q


def _same_shape(P, Q):
    if np.shape(P) != np.shape(Q):
        raise ValueError(f"shape mismatch {np.shape(P)} vs {np.shape(Q)}")


def _check_distribution(*maps):
    for m in maps:
        if (m < 0).any() or abs(m.sum() - 1.0) > _SUM_TOL:
            raise ValueError("input must be a distribution (non-negative, sums to 1)")


# ---------------------------------------------------------------------------
# location metrics

def _trapezoid(fpr, tpr) -> float:
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2))


def auc_judd(P, Q) -> float:
    P = np.asarray(P, dtype=np.float64)
    q = _fixations(Q)
    _same_shape(P, q)
    pos = np.sort(P[q])
    neg = np.sort(P[~q])
    if neg.size == 0:
        raise MetricUndefined("every pixel is fixated")
    thresholds = np.unique(pos)[::-1]
    tpr = (pos.size - np.searchsorted(pos, thresholds, side="left")) / pos.size
    fpr = (neg.size - np.searchsorted(neg, thresholds, side="left")) / neg.size
    return _trapezoid(np.r_[0.0, fpr, 1.0], np.r_[0.0, tpr, 1.0])


def _sampled_auc(P, q, rng, weights, n_samples, levels, repeats) -> float:
    pos = np.sort(P[q])
    cand = np.flatnonzero(~q.ravel())
    if cand.size == 0:
        raise MetricUndefined("every pixel is fixated")
    p = None
    if weights is not None:
        w = weights.ravel()[cand]
        p = w / w.sum()
    thresholds = np.linspace(1.0, 0.0, levels)
    tpr = np.r_[0.0, (pos.size - np.searchsorted(pos, thresholds, side="left")) / pos.size, 1.0]
    flat = P.ravel()
    n = n_samples or pos.size
    total = 0.0
    for _ in range(repeats):
        neg = np.sort(flat[rng.choice(cand, n, replace=True, p=p)])
        fpr = np.r_[0.0, (n - np.searchsorted(neg, thresholds, side="left")) / n, 1.0]
        total += _trapezoid(fpr, tpr)
    return total / repeats


def auc_borji(P, Q, cfg: MetricConfig | None = None, rng=None) -> float:
    """Negatives are non-fixated pixels drawn uniformly at random."""
    cfg = cfg or MetricConfig()
    P = np.asarray(P, dtype=np.float64)
    q = _fixations(Q)
    _same_shape(P, q)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    return _sampled_auc(P, q, rng, None, cfg.negative_samples, cfg.auc_thresholds, cfg.auc_repeats)


def auc_shuffled(P, Q, cfg: MetricConfig | None = None, rng=None, other_fixations=None) -> float:
    """Negatives drawn from a centre-weighted Gaussian over non-fixated pixels
    or, with ``sauc_mode="crossimage"``, from other images' fixations."""
    cfg = cfg or MetricConfig()
    P = np.asarray(P, dtype=np.float64)
    q = _fixations(Q)
    _same_shape(P, q)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if cfg.sauc_mode == "crossimage":
        if other_fixations is None or len(other_fixations) == 0:
            raise MetricUndefined("crossimage sAUC needs fixation maps of other images")
        pool = np.zeros(q.shape)
        for f in other_fixations:
            pool += np.asarray(f, dtype=bool)
        if not (pool.astype(bool) & ~q).any():
            raise MetricUndefined("other images fixate no pixel that this image leaves unfixated")
        weights = pool
    else:
        weights = center_prior(q.shape, cfg.sauc_sigma_fraction)
    return _sampled_auc(P, q, rng, weights, cfg.negative_samples, cfg.auc_thresholds, cfg.auc_repeats)


def nss(P, Q) -> float:
    P = np.asarray(P, dtype=np.float64)
    q = _fixations(Q)
    _same_shape(P, q)
    sd = P.std()
    if sd == 0:
        raise MetricUndefined("NSS is undefined for a constant map")
    return float(((P - P.mean()) / sd)[q].mean())


def infogain(P, Q, B, eps: float = 2.2e-16) -> float:
    """Bits per fixation gained by P over the baseline B."""
    P, B = np.asarray(P, dtype=np.float64), np.asarray(B, dtype=np.float64)
    q = _fixations(Q)
    _same_shape(P, q)
    _same_shape(B, q)
    return float(np.mean(np.log2(eps + P[q]) - np.log2(eps + B[q])))


def mae(P, Q, signed: bool = False) -> float:
    P, Q = np.asarray(P, dtype=np.float64), np.asarray(Q, dtype=np.float64)
    _same_shape(P, Q)
    d = P - Q
    return float(d.mean() if signed else np.abs(d).mean())


def mse(P, Q) -> float:
    P, Q = np.asarray(P, dtype=np.float64), np.asarray(Q, dtype=np.float64)
    _same_shape(P, Q)
    return float(np.mean((P - Q) ** 2))


# ---------------------------------------------------------------------------
# distribution metrics

def sim(P, Q) -> float:
    P, Q = np.asarray(P, dtype=np.float64), np.asarray(Q, dtype=np.float64)
    _same_shape(P, Q)
    _check_distribution(P, Q)
    return float(np.minimum(P, Q).sum())


def cc(P, Q) -> float:
    P, Q = np.asarray(P, dtype=np.float64), np.asarray(Q, dtype=np.float64)
    _same_shape(P, Q)
    sp, sq = P.std(), Q.std()
    if sp == 0 or sq == 0:
        raise MetricUndefined("CC is undefined for a constant map")
    return float(np.mean((P - P.mean()) * (Q - Q.mean())) / (sp * sq))


def kl(P, Q, eps: float = 2.2e-16) -> float:
    """KL divergence of the ground truth Q from the prediction P, in nats."""
    P, Q = np.asarray(P, dtype=np.float64), np.asarray(Q, dtype=np.float64)
    _same_shape(P, Q)
    _check_distribution(P, Q)
    if eps <= 0:
        raise ValueError("eps must be > 0")
    return float(np.sum(Q * np.log((Q + eps) / (P + eps))))


# ---------------------------------------------------------------------------

def pair_rng(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng([seed, *(zlib.crc32(str(k).encode()) for k in key)])


def evaluate_pair(saliency, attribution, cfg: MetricConfig | None = None, key=(),
                  other_fixations=None) -> list[MetricResult]:
    """All ten metrics for one (saliency, attribution) pair. A metric whose
    precondition fails is returned with ``missing=True`` and a NaN value."""
    cfg = cfg or MetricConfig()
    sal = np.asarray(getattr(saliency, "values", saliency), dtype=np.float64)
    att = np.asarray(getattr(attribution, "values", attribution), dtype=np.float64)
    _same_shape(sal, att)
    P = normalize_map(sal, "minmax01", cfg.signed_mode)
    Qc = normalize_map(att, "minmax01", cfg.signed_mode)
    Qb = binarize_gt(Qc, cfg.binarize_fraction)
    rng_b = pair_rng(cfg.seed, "bAUC", *key)
    rng_s = pair_rng(cfg.seed, "sAUC", *key)

    def dist(m):
        return normalize_map(m, "distribution", cfg.signed_mode)

    def base():
        if cfg.ig_baseline == "uniform":
            return np.full(P.shape, 1.0 / P.size)
        return center_prior(P.shape, cfg.sauc_sigma_fraction)

    jobs = {
        "jAUC": lambda: auc_judd(P, Qb),
        "bAUC": lambda: auc_borji(P, Qb, cfg, rng_b),
        "sAUC": lambda: auc_shuffled(P, Qb, cfg, rng_s, other_fixations),
        "NSS": lambda: nss(P, Qb),
        "IG": lambda: infogain(dist(sal), Qb, base(), cfg.epsilon),
        "MAE": lambda: mae(P, Qc, cfg.mae_signed),
        "MSE": lambda: mse(P, Qc),
        "SIM": lambda: sim(dist(sal), dist(att)),
        "CC": lambda: cc(dist(sal), dist(att)),
        "KL": lambda: kl(dist(sal), dist(att), cfg.epsilon),
    }
    out = []
    for name, fn in jobs.items():
        try:
            out.append(MetricResult(name, fn(), ORIENTATION[name]))
        except MetricUndefined as err:
            out.append(MetricResult(name, float("nan"), ORIENTATION[name], True, str(err)))
    return out
