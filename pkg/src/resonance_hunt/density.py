"""Density-ratio anomaly scores.

The background density ``p(x | m)`` is fit in narrow ``m`` bins of the
sideband on each side of the signal region and linearly interpolated into
it; a second density is fit directly to signal-region data.  The score is
``log p_sr(x) - log p_interp(x)``.

Two estimators share one interface (``pdf``, ``raw_pdf``, ``blend``):

* :class:`HistogramDensity`, equal-probability cells per feature;
* :class:`GaussianMixture`, fit by EM with k-means++ seeding.

Both live in feature coordinates standardized with sideband statistics,
and densities are floored at ``eps_pdf`` before taking logarithms.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np
from scipy.special import logsumexp

from .core import ConfigError, DataError, Dataset, Region, ScoreTable, WindowSpec, assign_regions
from .folds import SCHEMES, fold_assignment, holdout_mask

log = logging.getLogger(__name__)

EPS_PDF = 1e-12
MAX_CELLS = 1 << 24


@dataclass(frozen=True)
class HistogramConfig:
    bins: int = 8
    n_m_bins: int = 2
    eps_pdf: float = EPS_PDF

    kind = "hist"

    def __post_init__(self):
        if self.bins < 1:
            raise ConfigError("bins must be at least 1")
        if self.n_m_bins < 1:
            raise ConfigError("n_m_bins must be at least 1")

    def min_events(self, d: int) -> int:
        return 50 * d


@dataclass(frozen=True)
class MixtureConfig:
    K: int = 4
    em_max_iter: int = 200
    em_tol: float = 1e-6
    covariance: str = "full"
    n_m_bins: int = 2
    seed: int = 0
    eps_pdf: float = EPS_PDF

    kind = "gmm"

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if self.n_m_bins < 2:
            raise ConfigError("n_m_bins must be at least 2 on each side of the SR")
        if self.covariance not in ("full", "diagonal"):
            raise ConfigError("covariance must be 'full' or 'diagonal'")
        if self.em_max_iter < 1 or not self.em_tol > 0:
            raise ConfigError("em_max_iter and em_tol must be positive")

    def min_events(self, d: int) -> int:
        return 20 * self.K * d


EstimatorConfig = Union[HistogramConfig, MixtureConfig]


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        return cls(X.mean(axis=0), scale)

    def __call__(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.scale


# ---------------------------------------------------------------- histogram


class HistogramDensity:
    """Piecewise-constant density on a grid of per-axis cells.

    ``edges[j]`` are the cell boundaries of standardized feature ``j``;
    ``prob`` holds one probability per cell in C order.
    """

    kind = "hist"

    def __init__(self, edges, prob, std: Standardizer, eps_pdf=EPS_PDF):
        self.edges = [np.asarray(e, dtype=np.float64) for e in edges]
        self.shape = tuple(len(e) - 1 for e in self.edges)
        self.prob = np.asarray(prob, dtype=np.float64).reshape(-1)
        if self.prob.size != int(np.prod(self.shape)):
            raise DataError("probability table does not match the grid")
        self.std = std
        self.eps_pdf = eps_pdf
        vol = np.ones(1)
        for e in self.edges:
            vol = np.multiply.outer(vol, np.diff(e))
        self.volume = vol.reshape(-1)
        self.n_clamped = 0

    @staticmethod
    def grid(Z, bins: int):
        """Equal-probability edges of each column of ``Z`` (duplicates merged)."""
        qs = np.linspace(0.0, 1.0, bins + 1)
        edges = []
        for j in range(Z.shape[1]):
            e = np.unique(np.quantile(Z[:, j], qs))
            if e.size < 2:
                e = np.array([e[0] - 0.5, e[0] + 0.5])
            edges.append(e)
        if np.prod([len(e) - 1 for e in edges], dtype=float) > MAX_CELLS:
            raise ConfigError("histogram grid too large; lower bins or feature count")
        return edges

    @staticmethod
    def cell_index(Z, edges):
        """Flat cell index of every row and the number of clamped rows."""
        idx = np.zeros(len(Z), dtype=np.int64)
        outside = np.zeros(len(Z), dtype=bool)
        for j, e in enumerate(edges):
            nb = len(e) - 1
            col = Z[:, j]
            outside |= (col < e[0]) | (col > e[-1])
            k = np.searchsorted(e, col, side="right") - 1
            np.clip(k, 0, nb - 1, out=k)
            idx = idx * nb + k
        return idx, int(outside.sum())

    @classmethod
    def fit(cls, Zs, edges, std, eps_pdf=EPS_PDF) -> "HistogramDensity":
        """Count-and-divide estimate from already standardized rows."""
        size = int(np.prod([len(e) - 1 for e in edges]))
        idx, _ = cls.cell_index(Zs, edges)
        counts = np.bincount(idx, minlength=size).astype(np.float64)
        return cls(edges, counts / len(Zs), std, eps_pdf)

    def raw_pdf(self, X) -> np.ndarray:
        idx, clamped = self.cell_index(self.std(X), self.edges)
        self.n_clamped += clamped
        return self.prob[idx] / self.volume[idx]

    def pdf(self, X) -> np.ndarray:
        return np.maximum(self.raw_pdf(X), self.eps_pdf)

    def total(self) -> float:
        return float(self.prob.sum())

    def blend(self, other: "HistogramDensity", t: float) -> "HistogramDensity":
        p = np.clip((1 - t) * self.prob + t * other.prob, 0.0, None)
        return HistogramDensity(self.edges, p / p.sum(), self.std, self.eps_pdf)

    def same_grid(self, Zs) -> "HistogramDensity":
        return HistogramDensity.fit(Zs, self.edges, self.std, self.eps_pdf)


# ---------------------------------------------------------------- mixture


def _chol_logdet(cov):
    """Cholesky factors and log-determinants, with jitter on failure."""
    L = np.empty_like(cov)
    logdet = np.empty(len(cov))
    for k, c in enumerate(cov):
        jitter = 0.0
        for _ in range(8):
            try:
                L[k] = np.linalg.cholesky(c + jitter * np.eye(len(c)))
                break
            except np.linalg.LinAlgError:
                jitter = max(1e-10, 10 * jitter)
        else:
            raise np.linalg.LinAlgError("covariance is not positive definite")
        logdet[k] = 2.0 * np.log(np.diag(L[k])).sum()
    return L, logdet


def _component_logpdf(Z, weights, means, covs):
    """``log w_k + log N(z | mu_k, S_k)``, shape ``(n, K)``."""
    n, d = Z.shape
    L, logdet = _chol_logdet(covs)
    out = np.empty((n, len(weights)))
    for k in range(len(weights)):
        diff = Z - means[k]
        sol = np.linalg.solve(L[k], diff.T)
        out[:, k] = -0.5 * (np.sum(sol * sol, axis=0) + logdet[k] + d * math.log(2 * math.pi))
    with np.errstate(divide="ignore"):
        out += np.log(weights)[None, :]
    return out


class GaussianMixture:
    """Mixture of Gaussians in standardized feature coordinates."""

    kind = "gmm"

    def __init__(self, weights, means, covs, std: Standardizer, eps_pdf=EPS_PDF):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.asarray(means, dtype=np.float64)
        self.covs = np.asarray(covs, dtype=np.float64)
        self.std = std
        self.eps_pdf = eps_pdf
        self.loglik_history: list = []
        self.converged = True

    @property
    def K(self) -> int:
        return len(self.weights)

    def raw_means(self) -> np.ndarray:
        return self.std.mean + self.means * self.std.scale

    def raw_covs(self) -> np.ndarray:
        s = self.std.scale
        return self.covs * s[None, :, None] * s[None, None, :]

    def log_raw_pdf(self, X) -> np.ndarray:
        return logsumexp(_component_logpdf(self.std(X), self.weights, self.means, self.covs), axis=1)

    def raw_pdf(self, X) -> np.ndarray:
        return np.exp(self.log_raw_pdf(X))

    def pdf(self, X) -> np.ndarray:
        return np.maximum(self.raw_pdf(X), self.eps_pdf)

    def total(self) -> float:
        return float(self.weights.sum())

    def align_to(self, other: "GaussianMixture") -> np.ndarray:
        """Permutation ``perm`` so ``other`` component ``perm[k]`` matches our ``k``.

        Greedy: repeatedly pair the two closest unmatched means.
        """
        dist = np.linalg.norm(self.means[:, None, :] - other.means[None, :, :], axis=-1)
        perm = np.full(self.K, -1)
        dist = dist.copy()
        for _ in range(min(self.K, other.K)):
            i, j = np.unravel_index(np.argmin(dist), dist.shape)
            perm[i] = j
            dist[i, :] = np.inf
            dist[:, j] = np.inf
        return perm

    def blend(self, other: "GaussianMixture", t: float) -> "GaussianMixture":
        if other.K != self.K:
            raise DataError("cannot interpolate mixtures with different K")
        perm = self.align_to(other)
        w = np.clip((1 - t) * self.weights + t * other.weights[perm], 1e-300, None)
        mu = (1 - t) * self.means + t * other.means[perm]
        cov = (1 - t) * self.covs + t * other.covs[perm]
        if not 0.0 <= t <= 1.0:
            # extrapolation can leave the PD cone; project back
            vals, vecs = np.linalg.eigh(cov)
            cov = np.einsum("kij,kj,klj->kil", vecs, np.clip(vals, 1e-6, None), vecs)
        return GaussianMixture(w / w.sum(), mu, cov, self.std, self.eps_pdf)

    @classmethod
    def fit(cls, Z, cfg: MixtureConfig, std: Standardizer, rng: np.random.Generator) -> "GaussianMixture":
        """EM on standardized rows ``Z``.  ``loglik_history[t]`` is the mean
        log-likelihood of the parameters entering iteration ``t``."""
        n, d = Z.shape
        K = cfg.K
        centers = _kmeanspp(Z, K, rng)
        d2 = ((Z[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
        resp = np.zeros((n, K))
        resp[np.arange(n), np.argmin(d2, axis=1)] = 1.0
        weights, means, covs = _m_step(Z, resp, cfg.covariance)
        history = []
        converged = False
        for _ in range(cfg.em_max_iter):
            lp = _component_logpdf(Z, weights, means, covs)
            ll_rows = logsumexp(lp, axis=1)
            history.append(float(ll_rows.mean()))
            if len(history) > 1 and abs(history[-1] - history[-2]) < cfg.em_tol:
                converged = True
                break
            resp = np.exp(lp - ll_rows[:, None])
            weights, means, covs = _m_step(Z, resp, cfg.covariance, fallback=(weights, means, covs))
        gm = cls(weights, means, covs, std, cfg.eps_pdf)
        gm.loglik_history = history
        gm.converged = converged
        if not converged:
            log.warning("EM did not converge in %d iterations", cfg.em_max_iter)
        return gm


def _kmeanspp(Z, K, rng):
    n = len(Z)
    centers = [Z[rng.integers(n)]]
    d2 = ((Z - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            i = rng.integers(n)
        else:
            i = rng.choice(n, p=d2 / total)
        centers.append(Z[i])
        d2 = np.minimum(d2, ((Z - Z[i]) ** 2).sum(axis=1))
    return np.array(centers)


def _m_step(Z, resp, covariance, fallback=None):
    n, d = Z.shape
    nk = resp.sum(axis=0)
    K = len(nk)
    weights = nk / n
    means = np.empty((K, d))
    covs = np.empty((K, d, d))
    for k in range(K):
        if nk[k] < 1e-10 * n:
            if fallback is None:
                means[k] = Z.mean(axis=0)
                covs[k] = np.cov(Z, rowvar=False, bias=True).reshape(d, d)
            else:
                means[k] = fallback[1][k]
                covs[k] = fallback[2][k]
            continue
        r = resp[:, k]
        mu = r @ Z / nk[k]
        diff = Z - mu
        if covariance == "full":
            c = (diff * r[:, None]).T @ diff / nk[k]
        else:
            c = np.diag(r @ (diff * diff) / nk[k])
        means[k] = mu
        covs[k] = c
    return weights, means, covs


# ---------------------------------------------------------------- conditional


@dataclass
class CondDensity:
    """Per-``m``-bin densities with linear interpolation between the innermost
    left and right bins.  A single-bin instance is an unconditional density."""

    kind: str
    densities: list
    m_edges: np.ndarray
    eps_pdf: float = EPS_PDF
    interpolation: str = "linear"
    inner: tuple = (0, 0)
    diagnostics: dict = field(default_factory=dict)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.m_edges[:, 0] + self.m_edges[:, 1])

    @property
    def std(self) -> Standardizer:
        return self.densities[0].std

    def at(self, m: Optional[float] = None):
        """Density at ``m`` (ignored for a single bin)."""
        if len(self.densities) == 1:
            return self.densities[0]
        il, ir = self.inner
        cl, cr = self.centers[il], self.centers[ir]
        if m is None:
            m = 0.5 * (cl + cr)
        t = (m - cl) / (cr - cl)
        return self.densities[il].blend(self.densities[ir], t)

    def pdf(self, X, m: Optional[float] = None) -> np.ndarray:
        return self.at(m).pdf(X)

    @property
    def n_clamped(self) -> int:
        return sum(getattr(d, "n_clamped", 0) for d in self.densities)


def _side_bins(w: WindowSpec, n_m_bins: int):
    """Bins of width ``epsilon - delta`` stepping outwards from the SR edges."""
    width = w.epsilon - w.delta
    lo, hi = w.domain
    left, right = [], []
    for j in range(n_m_bins):
        a, b = w.m0 - w.delta - (j + 1) * width, w.m0 - w.delta - j * width
        if b > lo:
            left.append((max(a, lo), b))
        a, b = w.m0 + w.delta + j * width, w.m0 + w.delta + (j + 1) * width
        if a < hi:
            right.append((a, min(b, hi)))
    return left[::-1], right


def _fit_one(Zs, cfg: EstimatorConfig, std, edges=None, rng=None):
    if cfg.kind == "hist":
        return HistogramDensity.fit(Zs, edges, std, cfg.eps_pdf)
    return GaussianMixture.fit(Zs, cfg, std, rng)


def _rng(cfg, *key):
    seed = getattr(cfg, "seed", 0)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def fit_sideband_density(ds_SB: Dataset, w: WindowSpec, cfg: EstimatorConfig = HistogramConfig()) -> CondDensity:
    """Fit ``p(x | m)`` in m-bins on both sides of the SR, using SB events only."""
    reg = assign_regions(ds_SB.m, w)
    if np.any(reg == Region.SR):
        raise DataError("sideband fit received signal-region events")
    left, right = _side_bins(w, cfg.n_m_bins)
    if cfg.kind == "gmm" and (len(left) < cfg.n_m_bins or len(right) < cfg.n_m_bins):
        raise DataError("not enough sideband on both sides for the requested m-bins")
    if not left or not right:
        raise DataError("sideband must extend on both sides of the signal region")
    bins = left + right
    masks = []
    need = cfg.min_events(ds_SB.d)
    for a, b in bins:
        mk = (ds_SB.m >= a) & (ds_SB.m < b)
        if mk.sum() < need:
            raise DataError(
                f"insufficient sideband statistics in m-bin [{a:.4g}, {b:.4g}): "
                f"{int(mk.sum())} < {need}"
            )
        masks.append(mk)
    used = np.any(masks, axis=0)
    std = Standardizer.fit(ds_SB.x[used])
    Z = std(ds_SB.x)
    edges = HistogramDensity.grid(Z[used], cfg.bins) if cfg.kind == "hist" else None
    dens = [_fit_one(Z[mk], cfg, std, edges, _rng(cfg, 1, i)) for i, mk in enumerate(masks)]
    cd = CondDensity(cfg.kind, dens, np.array(bins), cfg.eps_pdf, inner=(len(left) - 1, len(left)))
    cd.diagnostics = {
        "bin_counts": [int(mk.sum()) for mk in masks],
        "interpolation_residual": _interpolation_residual(cd, Z, masks, ds_SB.x),
    }
    if cfg.kind == "gmm":
        cd.diagnostics["em_converged"] = [bool(g.converged) for g in dens]
    return cd


def _interpolation_residual(cd: CondDensity, Z, masks, X) -> Optional[float]:
    """Mean log-density gap on the innermost-left bin between its own fit and
    a line through its outer neighbour and the innermost-right bin."""
    il, ir = cd.inner
    if il < 1:
        return None
    c = cd.centers
    t = (c[il] - c[il - 1]) / (c[ir] - c[il - 1])
    pred = cd.densities[il - 1].blend(cd.densities[ir], t)
    Xin = X[masks[il]]
    own = cd.densities[il]
    before = getattr(own, "n_clamped", None)
    gap = float(np.mean(np.log(own.pdf(Xin)) - np.log(pred.pdf(Xin))))
    if before is not None:
        own.n_clamped = before
    return gap


def fit_sr_density(ds_SR: Dataset, cfg: EstimatorConfig = HistogramConfig(), reference: Optional[CondDensity] = None) -> CondDensity:
    """Single density over the SR.  ``reference`` supplies the standardization
    (and for histograms the grid) so both densities share coordinates."""
    need = 50 * ds_SR.d
    if len(ds_SR) < max(need, 1):
        raise DataError(f"insufficient signal-region statistics: {len(ds_SR)} < {need}")
    if reference is not None:
        std = reference.std
        edges = reference.densities[0].edges if cfg.kind == "hist" else None
    else:
        std = Standardizer.fit(ds_SR.x)
        edges = HistogramDensity.grid(std(ds_SR.x), cfg.bins) if cfg.kind == "hist" else None
    dens = _fit_one(std(ds_SR.x), cfg, std, edges, _rng(cfg, 2))
    lo, hi = float(ds_SR.m.min()), float(ds_SR.m.max())
    return CondDensity(cfg.kind, [dens], np.array([[lo, hi]]), cfg.eps_pdf)


def anode_score(p_sr: CondDensity, p_interp: CondDensity, ds: Dataset, m_eval: Optional[float] = None, window: Optional[WindowSpec] = None) -> ScoreTable:
    """``log max(p_sr, eps) - log max(p_interp, eps)`` per event.

    The background density is evaluated at ``m_eval`` (default: mean ``m``
    of ``ds``); under linear interpolation that equals its average over the
    signal-region ``m`` distribution.
    """
    if m_eval is None:
        m_eval = float(np.mean(ds.m))
    a = p_sr.at()
    b = p_interp.at(m_eval)
    for dd in (a, b):
        if hasattr(dd, "n_clamped"):
            dd.n_clamped = 0
    s = np.log(np.maximum(a.pdf(ds.x), p_sr.eps_pdf)) - np.log(np.maximum(b.pdf(ds.x), p_interp.eps_pdf))
    clamped = getattr(a, "n_clamped", 0) + (getattr(b, "n_clamped", 0) if b is not a else 0)
    region = assign_regions(ds.m, window) if window is not None else np.zeros(len(ds), dtype=np.int8)
    return ScoreTable(s, region, ds.m, ds.labels, window, {"method": "anode", "estimator": p_sr.kind, "n_clamped": int(clamped)})


@dataclass(frozen=True)
class AnodeConfig:
    """``scheme="holdout"`` fits on a hash-selected half and flags the other
    half for the hunt; ``"kfold"`` scores every event out-of-fold."""

    estimator: EstimatorConfig = HistogramConfig()
    k_folds: int = 5
    seed: int = 0
    scheme: str = "holdout"

    def __post_init__(self):
        if self.k_folds < 1:
            raise ConfigError("k_folds must be at least 1")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}")


def anode_scores(ds: Dataset, w: WindowSpec, cfg: AnodeConfig = AnodeConfig()) -> ScoreTable:
    """Density-ratio scores for every event of ``ds``.

    Under ``"kfold"`` each event is scored by densities fit without it, so
    no event inflates the density it is evaluated against.  Scores of
    different events still share training data, which correlates their
    selection; ``"holdout"`` removes that for the hunted half.
    """
    blind = ds.without_labels()
    reg = assign_regions(blind.m, w)
    n = len(blind)
    hunt = None
    if cfg.scheme == "holdout":
        hunt = ~holdout_mask(n, cfg.seed)
        plan = [(~hunt, np.ones(n, dtype=bool))]
    elif cfg.k_folds == 1:
        plan = [(np.ones(n, dtype=bool), np.ones(n, dtype=bool))]
    else:
        folds = fold_assignment(np.arange(n), cfg.k_folds, cfg.seed)
        plan = [(folds != f, folds == f) for f in range(cfg.k_folds)]
    score = np.empty(n)
    clamped = 0
    diags = []
    for f, (train, test) in enumerate(plan):
        sb = blind.subset(train & (reg != Region.SR))
        sr = blind.subset(train & (reg == Region.SR))
        est = cfg.estimator
        if est.kind == "gmm":
            est = replace(est, seed=int(cfg.seed * 1000003 + f) & 0x7FFFFFFF)
        p_interp = fit_sideband_density(sb, w, est)
        p_sr = fit_sr_density(sr, est, reference=p_interp)
        part = anode_score(p_sr, p_interp, blind.subset(test), m_eval=float(sr.m.mean()))
        score[test] = part.score
        clamped += part.meta["n_clamped"]
        diags.append(p_interp.diagnostics)
    meta = {
        "method": "anode",
        "estimator": cfg.estimator.kind,
        "scheme": cfg.scheme,
        "k_folds": cfg.k_folds,
        "n_clamped": int(clamped),
        "interpolation_residual": [d.get("interpolation_residual") for d in diags],
    }
    return ScoreTable(score, reg, blind.m, ds.labels, w, meta, hunt)
