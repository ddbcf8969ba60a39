"""Classification without labels.

A classifier is trained on the auxiliary features alone to tell signal
region events (class 1) from short-sideband events (class 0).  With a
smooth background the optimal such classifier is monotone in the
data-to-background likelihood ratio in the signal region, so its output
serves as an anomaly score.

Training is k-fold: the model for fold ``k`` never sees fold ``k``
(it validates on fold ``k+1`` and trains on the rest), and each training
event is later scored only by the model of its own fold.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .core import ConfigError, DataError, Dataset, DegenerateWindowError, Region, ScoreTable, WindowSpec, assign_regions
from .folds import SCHEMES, fold_assignment, holdout_mask

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassifierConfig:
    hidden: tuple = (64, 64)
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 512
    max_epochs: int = 40
    patience: int = 5
    k_folds: int = 5
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.k_folds < 2:
            raise ConfigError("k_folds must be at least 2")
        if any(h <= 0 for h in self.hidden):
            raise ConfigError("layer widths must be positive")
        if not (self.learning_rate > 0 and self.batch_size > 0 and self.max_epochs > 0):
            raise ConfigError("learning_rate, batch_size and max_epochs must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")


@dataclass
class FoldModel:
    params: list
    mean: np.ndarray
    scale: np.ndarray
    val_loss: float
    epochs: int
    stopped_early: bool

    def predict(self, X) -> np.ndarray:
        return nn.predict_proba(self.params, (X - self.mean) / self.scale)


@dataclass
class Scorer:
    """Trained k-fold ensemble; ``fold_of[i]`` is ``-1`` for events not used."""

    kind: str
    folds: list
    fold_of: np.ndarray
    train_digest: str
    d: int
    window: Optional[WindowSpec] = None
    config: Optional[ClassifierConfig] = None
    diagnostics: dict = field(default_factory=dict)

    def ensemble(self, X) -> np.ndarray:
        return np.mean([f.predict(X) for f in self.folds], axis=0)


def _standardizer(X, enabled: bool):
    if not enabled:
        return np.zeros(X.shape[1]), np.ones(X.shape[1])
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    return mean, scale


def _balanced_weights(y) -> np.ndarray:
    n1 = np.count_nonzero(y == 1)
    n0 = len(y) - n1
    w = np.empty(len(y))
    w[y == 1] = 0.5 * len(y) / max(n1, 1)
    w[y == 0] = 0.5 * len(y) / max(n0, 1)
    return w


def _train_folds(X, y, folds, cfg: ClassifierConfig) -> list:
    models = []
    k = cfg.k_folds
    for f in range(k):
        val = folds == (f + 1) % k
        tr = (folds != f) & ~val
        if np.unique(y[tr]).size < 2 or np.unique(y[val]).size < 2:
            raise DataError(f"fold {f} lacks one of the two classes")
        mean, scale = _standardizer(X[tr], cfg.standardize)
        Xtr = (X[tr] - mean) / scale
        Xval = (X[val] - mean) / scale
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed, spawn_key=(f,))))
        res = nn.train(
            Xtr, y[tr], _balanced_weights(y[tr]),
            cfg.hidden, rng,
            learning_rate=cfg.learning_rate,
            momentum=cfg.momentum,
            batch_size=cfg.batch_size,
            max_epochs=cfg.max_epochs,
            patience=cfg.patience,
            X_val=Xval, y_val=y[val], w_val=_balanced_weights(y[val]),
        )
        best = res.val_loss[res.best_epoch]
        models.append(FoldModel(res.params, mean, scale, best, len(res.val_loss), res.stopped_early))
        if not res.stopped_early:
            log.info("fold %d hit max_epochs=%d (val loss %.5f)", f, cfg.max_epochs, best)
    return models


def _fit(ds: Dataset, index: np.ndarray, y: np.ndarray, cfg: ClassifierConfig, kind: str, window=None) -> Scorer:
    folds = fold_assignment(index, cfg.k_folds, cfg.seed)
    models = _train_folds(ds.x[index], y, folds, cfg)
    fold_of = np.full(len(ds), -1, dtype=np.int64)
    fold_of[index] = folds
    chance = math.log(2.0)
    diagnostics = {
        "val_loss": [m.val_loss for m in models],
        "epochs": [m.epochs for m in models],
        "not_converged": [not m.stopped_early for m in models],
        "at_chance": [m.val_loss >= chance - 1e-4 for m in models],
    }
    return Scorer(kind, models, fold_of, ds.digest(), ds.d, window, cfg, diagnostics)


def train_cwola(ds: Dataset, w: WindowSpec, cfg: ClassifierConfig = ClassifierConfig()) -> Scorer:
    """k-fold SR-vs-SS classifier on ``x`` only (``m`` is never an input)."""
    reg = assign_regions(ds.m, w)
    sr = np.flatnonzero(reg == Region.SR)
    ss = np.flatnonzero(reg == Region.SS)
    need = 10 * cfg.k_folds
    if len(sr) < need or len(ss) < need:
        raise DegenerateWindowError(
            f"need >= {need} events in SR and SS, got {len(sr)} and {len(ss)}"
        )
    index = np.concatenate([sr, ss])
    order = np.argsort(index, kind="stable")
    index = index[order]
    y = (reg[index] == Region.SR).astype(np.float64)
    return _fit(ds, index, y, cfg, "cwola", w)


def train_supervised(ds: Dataset, cfg: ClassifierConfig = ClassifierConfig(), window: Optional[WindowSpec] = None) -> Scorer:
    """Same machinery with truth labels as targets (the performance ceiling).

    With ``window`` only signal-region events are used for training.
    """
    if not ds.labeled:
        raise DataError("supervised training needs a labeled dataset")
    if window is not None:
        index = np.flatnonzero(assign_regions(ds.m, window) == Region.SR)
    else:
        index = np.arange(len(ds))
    y = ds.labels[index].astype(np.float64)
    if np.unique(y).size < 2:
        raise DataError("supervised training needs both classes present")
    return _fit(ds, index, y, cfg, "supervised", window)


def score(s: Scorer, ds: Dataset, window: Optional[WindowSpec] = None) -> ScoreTable:
    """Scores in [0, 1]: out-of-fold for training events, ensemble mean otherwise."""
    if ds.d != s.d:
        raise DataError(f"scorer expects d={s.d} features, dataset has {ds.d}")
    window = window or s.window
    out = s.ensemble(ds.x)
    if len(ds) == len(s.fold_of) and ds.digest() == s.train_digest:
        for f, model in enumerate(s.folds):
            sel = np.flatnonzero(s.fold_of == f)
            if sel.size:
                out[sel] = model.predict(ds.x[sel])
    region = assign_regions(ds.m, window) if window is not None else np.zeros(len(ds), dtype=np.int8)
    meta = {"method": s.kind, **{k: v for k, v in s.diagnostics.items()}}
    return ScoreTable(out, region, ds.m, ds.labels, window, meta)


def cwola_scores(ds: Dataset, w: WindowSpec, cfg: ClassifierConfig = ClassifierConfig(),
                 scheme: str = "holdout") -> ScoreTable:
    """Train on a label-stripped view and score every event.

    ``"holdout"`` trains the k-fold ensemble on a hash-selected half,
    scores that half out-of-fold and the other half with the ensemble, and
    flags the other half for the hunt;
    ``"kfold"`` trains on all SR and SS events and scores them out-of-fold.
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"scheme must be one of {SCHEMES}")
    blind = ds.without_labels()
    if scheme == "holdout":
        train = holdout_mask(len(blind), cfg.seed)
        part = blind.subset(train)
        s = train_cwola(part, w, cfg)
        table = score(s, blind, w)
        table.score[train] = score(s, part, w).score
        table.hunt = ~train
    else:
        table = score(train_cwola(blind, w, cfg), blind, w)
    table.meta["scheme"] = scheme
    table.labels = None if ds.labels is None else np.asarray(ds.labels)
    return table
