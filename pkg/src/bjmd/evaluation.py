"""Clustering AUC metric, noise-recovery scoring and noise-calibrated feature selection."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .core import BJMDError, DimensionMismatchError, InvariantViolationError, MultiViewData

logger = logging.getLogger(__name__)


class DegenerateLabelsError(BJMDError, ValueError):
    pass


def auc(labels, scores) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted as one half."""
    labels = np.asarray(labels).astype(bool).ravel()
    scores = np.asarray(scores, dtype=float).ravel()
    if labels.shape != scores.shape:
        raise DimensionMismatchError(f"{labels.size} labels for {scores.size} scores")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("labels need at least one positive and one negative")
    ranks = stats.rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ClusterMetric:
    r: float
    r_k: np.ndarray
    excluded: int


def cluster_metric(H, L) -> ClusterMetric:
    """For each label row, the best AUC any coefficient row achieves; averaged over label rows.

    Label rows that are all 0 or all 1 cannot be scored and are left out of the
    average (``r_k`` is NaN there).
    """
    H = np.asarray(H, dtype=float)
    L = np.asarray(L)
    if H.ndim != 2 or L.ndim != 2 or H.shape[1] != L.shape[1]:
        raise DimensionMismatchError(f"H {H.shape} and labels {L.shape} are not conformable")
    r_k = np.full(L.shape[0], np.nan)
    for k, row in enumerate(L):
        pos = int(row.sum())
        if pos == 0 or pos == row.size:
            continue
        r_k[k] = max(auc(row, h) for h in H)
    excluded = int(np.isnan(r_k).sum())
    if excluded == L.shape[0]:
        raise DegenerateLabelsError("every label row is degenerate")
    if excluded:
        logger.warning("cluster metric: %d degenerate label row(s) excluded", excluded)
    return ClusterMetric(float(np.nanmean(r_k)), r_k, excluded)


def noise_recovery(sigmas_est, sigmas_true) -> np.ndarray:
    est = np.asarray(sigmas_est, dtype=float)
    true = np.asarray(sigmas_true, dtype=float)
    if est.shape != true.shape:
        raise DimensionMismatchError("estimated and true noise levels differ in length")
    return np.abs(est - true) / true


@dataclass
class FeatureSelectReport:
    pvalues: np.ndarray  # (C, M)
    qvalues: np.ndarray  # (C, M)
    selected: np.ndarray  # feature indices
    significance: float
    mode: str = "any"

    def to_dict(self):
        return {
            "significance": self.significance,
            "mode": self.mode,
            "selected": self.selected.tolist(),
            "n_selected": int(self.selected.size),
            "n_features": int(self.pvalues.shape[1]),
            "pvalues": self.pvalues.tolist(),
            "qvalues": self.qvalues.tolist(),
        }


def variance_pvalues(data: MultiViewData, sigma2) -> np.ndarray:
    """Upper-tail chi-square p-values of ``(N_c - 1) s^2 / sigma2_c`` for every feature and source."""
    sigma2 = np.asarray(sigma2, dtype=float)
    if sigma2.shape != (data.C,) or np.any(sigma2 <= 0):
        raise InvariantViolationError("one positive sigma2 per source")
    P = np.ones((data.C, data.M))
    for c, x in enumerate(data.sources):
        n = x.shape[1]
        if n < 2:
            raise InvariantViolationError("N_c >= 2", f"source {c}")
        s2 = x.var(axis=1, ddof=1)
        stat = (n - 1) * s2 / sigma2[c]
        p = stats.chi2.sf(stat, n - 1)
        P[c] = np.where(s2 > 0, p, 1.0)
    return P


def select_features(data: MultiViewData, sigmas2_est, significance=0.05, mode="any") -> FeatureSelectReport:
    """Keep features whose variance significantly exceeds the fitted noise level.

    Bonferroni over all C*M tests. ``mode="any"`` keeps a feature significant in
    at least one source, ``"all"`` requires every source.
    """
    if mode not in ("any", "all"):
        raise ValueError(f"mode must be 'any' or 'all', got {mode!r}")
    P = variance_pvalues(data, sigmas2_est)
    Q = np.minimum(1.0, P * P.size)
    hits = Q < significance
    keep = hits.any(axis=0) if mode == "any" else hits.all(axis=0)
    return FeatureSelectReport(P, Q, np.flatnonzero(keep), float(significance), mode)
