"""Truth-label metrics: ROC, AUC, SIC and comparison against a sealed key."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .core import DataError, ScoreTable


@dataclass
class RocCurve:
    """ROC points from the strictest threshold down to the loosest.

    ``tp`` and ``fp`` are integer cumulative counts; index 0 is the
    ``(0, 0)`` point above the top score, the last index is ``(1, 1)``.
    """

    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    n_signal: int
    n_background: int

    @property
    def tpr(self) -> np.ndarray:
        return self.tp / self.n_signal

    @property
    def fpr(self) -> np.ndarray:
        return self.fp / self.n_background

    def to_table(self) -> dict:
        return {"threshold": self.thresholds, "tpr": self.tpr, "fpr": self.fpr}


@dataclass
class SicCurve:
    tpr: np.ndarray
    fpr: np.ndarray
    sic: np.ndarray
    fpr_floor: float

    @property
    def max_index(self) -> int:
        return int(np.argmax(self.sic))

    @property
    def max_sic(self) -> float:
        return float(self.sic[self.max_index])

    @property
    def tpr_at_max(self) -> float:
        return float(self.tpr[self.max_index])


def roc(scores, labels=None) -> RocCurve:
    """ROC over every distinct threshold with tied scores moving together.

    ``scores`` is a labeled :class:`ScoreTable` or an array, in which case
    ``labels`` must be given.
    """
    if isinstance(scores, ScoreTable):
        if labels is None:
            labels = scores.labels
        scores = scores.score
    if labels is None:
        raise DataError("ROC needs truth labels")
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.shape != y.shape:
        raise DataError("scores and labels differ in length")
    if np.any(np.isnan(s)):
        raise DataError("NaN scores")
    n_sig = int(y.sum())
    n_bkg = int(len(y) - n_sig)
    if n_sig == 0 or n_bkg == 0:
        raise DataError("ROC needs both classes present")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return RocCurve(
        thresholds=np.r_[np.inf, s[last]],
        tp=np.r_[0, tp].astype(np.int64),
        fp=np.r_[0, fp].astype(np.int64),
        n_signal=n_sig,
        n_background=n_bkg,
    )


def auc(c: RocCurve) -> float:
    """Trapezoidal area, accumulated in exact integer arithmetic.

    Equals the normalized Mann-Whitney U with ties counted half.
    """
    # int64 is exact while 2 * n_signal * n_background stays below 2**63
    kind = np.int64 if 2 * c.n_signal * c.n_background < 2**62 else object
    dfp = np.diff(c.fp).astype(kind)
    tsum = (c.tp[1:] + c.tp[:-1]).astype(kind)
    twice_area = int(np.sum(dfp * tsum)) if len(dfp) else 0
    return float(Fraction(twice_area, 2 * c.n_signal * c.n_background))


def default_fpr_floor(n_background: int) -> float:
    """Ten background events at the working point."""
    return 10.0 / n_background


def sic_curve(c: RocCurve, fpr_floor: Optional[float] = None) -> SicCurve:
    """``TPR / sqrt(FPR)`` at every ROC point with ``FPR >= fpr_floor``."""
    if fpr_floor is None:
        fpr_floor = default_fpr_floor(c.n_background)
    if not fpr_floor > 0:
        raise DataError("fpr_floor must be positive")
    tpr, fpr = c.tpr, c.fpr
    keep = fpr >= fpr_floor
    if not np.any(keep):
        raise DataError(f"no ROC point at or above fpr_floor={fpr_floor:g}")
    tpr, fpr = tpr[keep], fpr[keep]
    return SicCurve(tpr, fpr, tpr / np.sqrt(fpr), float(fpr_floor))


def sic(tpr: float, fpr: float) -> float:
    return tpr / math.sqrt(fpr)


def metrics(table: ScoreTable, fpr_floor: Optional[float] = None) -> dict:
    """AUC and SIC summary; with a hunt mask only out-of-sample events count."""
    if table.hunt is not None:
        table = table.subset(table.hunt)
    c = roc(table)
    s = sic_curve(c, fpr_floor)
    return {
        "auc": auc(c),
        "max_sic": s.max_sic,
        "tpr_at_max_sic": s.tpr_at_max,
        "fpr_floor": s.fpr_floor,
        "n_signal": c.n_signal,
        "n_background": c.n_background,
    }


def compare_to_key(hunt, estimate, key, data_path=None) -> dict:
    """Challenge deliverable check of a hunt result against a sealed key.

    ``estimate`` is ``(count, sigma)``.  The key's seal (and, with
    ``data_path``, the analyzed file's digest) is verified first.
    """
    key.verify(data_path)
    value, sigma = float(estimate[0]), float(estimate[1])
    if not sigma > 0:
        raise DataError("signal-count uncertainty must be positive")
    w = hunt.best_window() if hunt is not None else None
    localized = bool(w is not None and w.contains_sr(key.m0))
    return {
        "estimate": value,
        "sigma": sigma,
        "truth": int(key.signal_count),
        "pull": (value - key.signal_count) / sigma,
        "localized": localized,
        "best_m0": None if w is None else w.m0,
        "true_m0": float(key.m0),
        "global_p": None if hunt is None else hunt.global_p,
    }
