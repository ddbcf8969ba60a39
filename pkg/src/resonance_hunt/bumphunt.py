"""Sideband-calibrated bump hunt.

For each window and each score-efficiency quantile ``q``:

1. keep events whose score exceeds the ``1 - q`` quantile of sideband scores;
2. fit the four-parameter falling spectrum to the surviving sideband ``m``
   histogram by binned Poisson maximum likelihood, the signal region masked;
3. integrate the fit over the signal region for the expected count ``lam``;
4. convert the observed signal-region count into a Poisson tail probability.

The smallest local p-value over the scan is corrected for the number of
independent signal regions times the number of quantiles.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, optimize, special
from scipy.special import gammaln, logsumexp

from .core import (
    ConfigError,
    DataError,
    Dataset,
    NumericalError,
    Region,
    ResonanceHuntError,
    ScoreTable,
    WindowSpec,
)
from .spectrum import default_m_scale, gauss_legendre_nodes, log_basis
from .windows import ScanPlan

log = logging.getLogger(__name__)

DEFAULT_QUANTILES = (0.1, 0.01, 0.001)
MIN_FIT_BINS = 20
_POISSON_LINEAR_MAX = 50.0


# ---------------------------------------------------------------- selection


def quantile_threshold(scores: ScoreTable, q: float) -> float:
    if not 0.0 < q < 1.0:
        raise ConfigError(f"quantile q must lie in (0, 1), got {q}")
    sb = scores.score[scores.sideband_mask() & scores.hunt_mask()]
    if sb.size == 0:
        raise DataError("no sideband scores to set a threshold")
    return float(np.quantile(sb, 1.0 - q))


def apply_threshold(scores: ScoreTable, threshold: float) -> ScoreTable:
    """Hunt-eligible events scoring strictly above ``threshold``."""
    out = scores.subset((scores.score > threshold) & scores.hunt_mask())
    out.meta["threshold"] = float(threshold)
    return out


def select_by_quantile(scores: ScoreTable, q: float) -> ScoreTable:
    """Events scoring strictly above the ``1 - q`` quantile of sideband scores.

    With a hunt mask both the quantile and the selection use only the
    events the scorer was not trained on.
    """
    return apply_threshold(scores, quantile_threshold(scores, q))


# ---------------------------------------------------------------- fit


@dataclass
class BackgroundFit:
    alpha: np.ndarray
    m_scale: float
    cov: np.ndarray
    chi2: float
    ndf: int
    ks_statistic: float = float("nan")
    ks_pvalue: float = float("nan")
    edges: np.ndarray = field(default_factory=lambda: np.empty(0))
    fit_mask: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=bool))
    exclude: Optional[tuple] = None
    n_fit: int = 0
    nll: float = float("nan")
    converged: bool = True

    @property
    def fit_range(self) -> tuple:
        return (float(self.edges[0]), float(self.edges[-1]))

    def density(self, m) -> np.ndarray:
        """Fitted count density per unit ``m``."""
        return self.alpha[0] * np.exp(log_basis(m, self.m_scale) @ self.alpha[1:])

    def bin_expectations(self) -> np.ndarray:
        nodes, weights = gauss_legendre_nodes(self.edges)
        return np.sum(weights * self.density(nodes), axis=1)

    def _cdf_table(self, knots_per_bin: int = 64):
        """Cumulative fitted count over the included bins, tabulated finely."""
        if getattr(self, "_table", None) is not None:
            return self._table
        xs, cs = [], []
        total = 0.0
        for lo, hi, use in zip(self.edges[:-1], self.edges[1:], self.fit_mask):
            grid = np.linspace(lo, hi, knots_per_bin + 1)
            if use:
                nodes, weights = gauss_legendre_nodes(grid)
                piece = np.sum(weights * self.density(nodes), axis=1)
            else:
                piece = np.zeros(knots_per_bin)
            xs.append(grid[:-1])
            cs.append(total + np.concatenate([[0.0], np.cumsum(piece)[:-1]]))
            total += piece.sum()
        xs.append([self.edges[-1]])
        cs.append([total])
        self._table = (np.concatenate(xs), np.concatenate(cs) / total)
        return self._table

    def cdf(self, m) -> np.ndarray:
        """CDF of the fit restricted to the fitted (non-excluded) bins."""
        x, c = self._cdf_table()
        return np.interp(m, x, c)

    def in_fit_region(self, m) -> np.ndarray:
        m = np.asarray(m)
        idx = np.searchsorted(self.edges, m, side="right") - 1
        ok = (idx >= 0) & (idx < len(self.fit_mask))
        out = np.zeros(m.shape, dtype=bool)
        out[ok] = self.fit_mask[idx[ok]]
        return out

    def summary(self) -> dict:
        return {
            "alpha": [float(a) for a in self.alpha],
            "m_scale": float(self.m_scale),
            "cov": [[float(v) for v in row] for row in self.cov],
            "chi2": float(self.chi2),
            "ndf": int(self.ndf),
            "ks_statistic": float(self.ks_statistic),
            "ks_pvalue": float(self.ks_pvalue),
            "n_fit": int(self.n_fit),
            "converged": bool(self.converged),
        }


def sideband_edges(w: WindowSpec, bin_width: Optional[float] = None) -> np.ndarray:
    """Bin edges over the domain with the SR as exactly one (masked) bin."""
    bw = w.delta / 2 if bin_width is None else float(bin_width)
    if not bw > 0:
        raise ConfigError("bin width must be positive")
    lo, hi = w.domain
    a, b = w.sr
    n_left = max(1, int(math.ceil((a - lo) / bw - 1e-9))) if a > lo else 0
    n_right = max(1, int(math.ceil((hi - b) / bw - 1e-9))) if hi > b else 0
    left = np.linspace(lo, a, n_left + 1) if n_left else np.array([a])
    right = np.linspace(b, hi, n_right + 1) if n_right else np.array([b])
    return np.concatenate([left, right])


def equal_count_edges(w: WindowSpec, m_sb, n_bins: int = 24) -> np.ndarray:
    """Data-driven edges for sparse samples: equal-count bins on each side of the SR."""
    lo, hi = w.domain
    a, b = w.sr
    m_sb = np.asarray(m_sb, dtype=np.float64)
    left, right = m_sb[m_sb < a], m_sb[m_sb >= b]
    n = max(len(m_sb), 1)
    out = []
    for part, (x0, x1) in ((left, (lo, a)), (right, (b, hi))):
        if x1 <= x0:
            out.append(np.array([x0]))
            continue
        k = max(1, int(round(n_bins * len(part) / n)))
        if len(part) >= 2 * k:
            inner = np.quantile(part, np.linspace(0, 1, k + 1)[1:-1])
            edges = np.unique(np.concatenate([[x0], inner, [x1]]))
        else:
            edges = np.linspace(x0, x1, k + 1)
        out.append(edges)
    return np.unique(np.concatenate(out))


def fit_edges(w: WindowSpec, m_sb, bin_width: Optional[float] = None) -> np.ndarray:
    """Uniform edges, or equal-count edges when too few uniform bins are filled."""
    edges = sideband_edges(w, bin_width)
    counts = np.histogram(m_sb, bins=edges)[0]
    sb_bins = ~((edges[:-1] < w.sr[1]) & (edges[1:] > w.sr[0]))
    if np.count_nonzero(counts[sb_bins]) >= MIN_FIT_BINS:
        return edges
    return equal_count_edges(w, m_sb)


def _start_points(phi, counts):
    """Least-squares seed on log counts plus seven fixed corners."""
    starts = []
    nz = counts > 0
    centers = phi.mean(axis=1)
    if nz.sum() >= 4:
        A = np.column_stack([np.ones(nz.sum()), centers[nz]])
        sol, *_ = np.linalg.lstsq(A, np.log(counts[nz]), rcond=None)
        if np.all(np.isfinite(sol)):
            starts.append(sol[1:])
    corners = [(a1, a2, a3) for a1 in (2.0, 10.0) for a2 in (-3.0, -8.0) for a3 in (0.5, -0.5)]
    starts.extend(np.array(c) for c in corners)
    return [np.asarray(s, dtype=np.float64) for s in starts[:8]]


def fit_background_shape(m_values, binning, m_scale: float, exclude: Optional[tuple] = None) -> BackgroundFit:
    """Binned Poisson maximum-likelihood fit of the four-parameter spectrum.

    ``binning`` is an array of bin edges.  Bins overlapping ``exclude``
    (normally the signal region) are left out.  The normalization is
    profiled analytically; the three shape parameters are optimized by
    Nelder-Mead from eight deterministic starts and the best run is
    restarted until it stops improving.  The covariance is the inverse of
    the exact observed Hessian of the negative log-likelihood.
    """
    edges = np.asarray(binning, dtype=np.float64)
    m_values = np.asarray(m_values, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ConfigError("binning must be increasing bin edges")
    counts_all = np.histogram(m_values, bins=edges)[0].astype(np.float64)
    use = np.ones(len(counts_all), dtype=bool)
    if exclude is not None:
        ea, eb = exclude
        use &= ~((edges[:-1] < eb) & (edges[1:] > ea))
    if np.count_nonzero(counts_all[use] > 0) < MIN_FIT_BINS:
        raise DataError(
            f"need >= {MIN_FIT_BINS} non-empty sideband bins, got {int(np.count_nonzero(counts_all[use] > 0))}"
        )
    counts = counts_all[use]
    nodes, weights = _nodes_for(edges, use)
    phi = log_basis(nodes, m_scale)  # (nb, 8, 3)
    N = counts.sum()

    def log_I(beta):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return np.log(np.sum(np.exp(phi @ beta) * weights, axis=1))

    def profiled_nll(beta):
        li = log_I(beta)
        if not np.all(np.isfinite(li)):
            return np.inf
        log_a0 = math.log(N) - math.log(np.sum(np.exp(li)))
        return float(N - np.dot(counts, log_a0 + li))

    best = None
    for s in _start_points(phi, counts):
        # simplexes touching invalid shapes compare inf with inf
        with np.errstate(invalid="ignore"):
            r = optimize.minimize(profiled_nll, s, method="Nelder-Mead",
                                  options={"xatol": 1e-4, "fatol": 1e-6, "maxiter": 300})
        if best is None or r.fun < best.fun:
            best = r
    beta, value, converged = _newton_polish(best.x, best.fun, profiled_nll, phi, weights, counts)
    li = log_I(beta)
    with np.errstate(over="ignore", divide="ignore"):
        a0 = float(N / np.sum(np.exp(li)))
    alpha = np.concatenate([[a0], beta])

    g = np.exp(phi @ beta) * weights  # integrand weights per node
    mu = a0 * g.sum(axis=1)
    if not (np.all(np.isfinite(mu)) and np.all(mu > 0)):
        raise NumericalError("fitted spectrum is not finite and positive over the fitted range")
    H = _observed_hessian(a0, g, phi, counts, mu)
    try:
        cov = np.linalg.inv(H)
        if not np.all(np.isfinite(cov)) or np.any(np.diag(cov) <= 0):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(H)
        converged = False
    chi2 = float(np.sum((counts - mu) ** 2 / mu))
    fit = BackgroundFit(
        alpha=alpha,
        m_scale=float(m_scale),
        cov=cov,
        chi2=chi2,
        ndf=int(len(counts) - 4),
        edges=edges,
        fit_mask=use,
        exclude=None if exclude is None else (float(exclude[0]), float(exclude[1])),
        n_fit=int(N),
        nll=float(np.sum(mu - counts * np.log(mu))),
        converged=converged,
    )
    inside = m_values[fit.in_fit_region(m_values)]
    if inside.size >= 10 and np.ptp(inside) > 0:
        fit.ks_statistic, fit.ks_pvalue = ks_test(inside, fit)
    if not converged:
        log.warning("background fit did not converge cleanly")
    return fit


def _profiled_derivatives(beta, phi, weights, counts):
    """Gradient and Hessian of the profiled NLL in the shape parameters."""
    with np.errstate(over="ignore"):
        g = np.exp(phi @ beta) * weights
    I = g.sum(axis=1)
    if not (np.all(np.isfinite(I)) and np.all(I > 0)):
        raise np.linalg.LinAlgError("bin integrals not finite and positive")
    S1 = np.einsum("ik,ikj->ij", g, phi)
    S2 = np.einsum("ik,ikj,ikl->ijl", g, phi, phi)
    N, It = counts.sum(), I.sum()
    s1, s2 = S1.sum(axis=0), S2.sum(axis=0)
    with np.errstate(all="ignore"):
        grad = N * s1 / It - (counts / I) @ S1
        hess = N * (s2 / It - np.outer(s1, s1) / It**2)
        hess -= np.einsum("i,ijk->jk", counts / I, S2) - np.einsum("i,ij,ik->jk", counts / I**2, S1, S1)
    if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))):
        raise np.linalg.LinAlgError("derivatives overflowed")
    return grad, hess


def _newton_polish(beta, value, nll, phi, weights, counts, max_iter=50):
    """Damped Newton refinement of the best simplex result."""
    for _ in range(max_iter):
        try:
            grad, hess = _profiled_derivatives(beta, phi, weights, counts)
            step = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return beta, value, False
        if grad @ step >= 0:
            step = -grad / max(np.abs(hess).max(), 1.0)
        t = 1.0
        while t > 1e-8:
            cand = beta + t * step
            v = nll(cand)
            if v <= value + 1e-4 * t * (grad @ step):
                break
            t *= 0.5
        else:
            return beta, value, bool(np.max(np.abs(grad)) < 1e-4)
        beta, value = cand, v
        if np.max(np.abs(t * step)) < 1e-10:
            break
    try:
        grad, hess = _profiled_derivatives(beta, phi, weights, counts)
    except np.linalg.LinAlgError:
        return beta, value, False
    ok = np.max(np.abs(grad)) < 1e-4 * max(1.0, counts.sum() ** 0.5)
    return beta, value, bool(ok and np.all(np.linalg.eigvalsh(hess) > 0))


def _nodes_for(edges, use):
    nodes, weights = gauss_legendre_nodes(edges)
    return nodes[use], weights[use]


def _observed_hessian(a0, g, phi, n, mu):
    """Exact Hessian of sum(mu - n log mu) in (a0, a1, a2, a3)."""
    # d mu_i / d theta_j and d2 mu_i / d theta_j d theta_k
    S1 = np.einsum("ik,ikj->ij", g, phi)            # sum_k g * phi_j
    S2 = np.einsum("ik,ikj,ikl->ijl", g, phi, phi)  # sum_k g * phi_j * phi_l
    nb = len(mu)
    d1 = np.empty((nb, 4))
    d1[:, 0] = g.sum(axis=1)
    d1[:, 1:] = a0 * S1
    d2 = np.zeros((nb, 4, 4))
    d2[:, 0, 1:] = S1
    d2[:, 1:, 0] = S1
    d2[:, 1:, 1:] = a0 * S2
    r = n / mu
    return np.einsum("i,ij,ik->jk", r / mu, d1, d1) + np.einsum("i,ijk->jk", 1.0 - r, d2)


# ---------------------------------------------------------------- KS


def kolmogorov_sf(lam: float) -> float:
    """``2 * sum_{k>=1} (-1)^(k-1) exp(-2 k^2 lam^2)``, terms below 1e-10 dropped."""
    if lam <= 0:
        return 1.0
    total = 0.0
    k = 1
    while True:
        term = math.exp(-2.0 * k * k * lam * lam)
        if term < 1e-10:
            break
        total += term if k % 2 else -term
        k += 1
    return float(min(1.0, max(0.0, 2.0 * total)))


def ks_statistic(m_values, cdf: Callable) -> float:
    x = np.sort(np.asarray(m_values, dtype=np.float64))
    n = x.size
    F = cdf(x)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


def ks_test(m_values, fit: BackgroundFit) -> tuple:
    m_values = np.asarray(m_values, dtype=np.float64)
    if m_values.size < 10:
        raise DataError("KS test needs at least 10 values")
    if np.ptp(m_values) == 0:
        raise DataError("KS test on a constant sample")
    D = ks_statistic(m_values, fit.cdf)
    return D, kolmogorov_sf(math.sqrt(m_values.size) * D)


def ks_pvalue(m_values, fit: BackgroundFit) -> float:
    """One-sample KS p-value of ``m_values`` against the fit's normalized CDF."""
    return ks_test(m_values, fit)[1]


# ---------------------------------------------------------------- expectation


def expected_sr_count(fit: BackgroundFit, w: WindowSpec) -> tuple:
    """``(lam, sigma_lam)``: fit integrated over the SR, error from the covariance."""
    a, b = w.sr
    lo, hi = fit.fit_range
    if a < lo or b > hi:
        raise DataError("signal region lies outside the fitted range")
    beta = fit.alpha[1:]

    def integrand(m, j):
        ph = log_basis(np.array([m]), fit.m_scale)[0]
        v = math.exp(float(ph @ beta))
        return v if j < 0 else v * ph[j]

    vals = [integrate.quad(integrand, a, b, args=(j,), epsrel=1e-8, epsabs=0.0, limit=200)[0] for j in (-1, 0, 1, 2)]
    shape_int = vals[0]
    lam = fit.alpha[0] * shape_int
    grad = np.array([shape_int, *(fit.alpha[0] * v for v in vals[1:])])
    var = float(grad @ fit.cov @ grad)
    return float(lam), float(math.sqrt(max(var, 0.0)))


# ---------------------------------------------------------------- Poisson


def poisson_logsf(n_obs: int, lam: float) -> float:
    """``log Pr(N >= n_obs)`` for ``N ~ Poisson(lam)``."""
    if not lam > 0:
        raise ConfigError("Poisson mean must be positive")
    n = int(n_obs)
    if n <= 0:
        return 0.0
    span = int(40 * math.sqrt(lam) + 60)
    log_lam = math.log(lam)
    if n > lam:
        k = np.arange(n, n + span, dtype=np.float64)
        return float(logsumexp(-lam + k * log_lam - gammaln(k + 1)))
    k = np.arange(max(0, n - span), n, dtype=np.float64)
    log_lower = float(logsumexp(-lam + k * log_lam - gammaln(k + 1)))
    return float(np.log1p(-min(math.exp(log_lower), 1.0))) if log_lower < 0 else -np.inf


def poisson_pvalue(n_obs: int, lam: float) -> float:
    """``Pr(N >= n_obs | lam)``: direct summation for ``lam <= 50``, log-space above."""
    if not lam > 0:
        raise ConfigError("Poisson mean must be positive")
    n = int(n_obs)
    if n <= 0:
        return 1.0
    if lam > _POISSON_LINEAR_MAX:
        return float(math.exp(poisson_logsf(n, lam)))
    term = math.exp(-lam)
    if n <= lam + 1:
        lower = 0.0
        for k in range(n):
            lower += term
            term *= lam / (k + 1)
        return float(min(1.0, max(0.0, 1.0 - lower)))
    # upper tail summed directly so small p keep full relative precision
    for k in range(n):
        term *= lam / (k + 1)
    upper = 0.0
    k = n
    while term > 1e-18 * upper or upper == 0.0:
        upper += term
        k += 1
        term *= lam / k
        if term == 0.0:
            break
    return float(min(1.0, upper))


def z_from_logp(log_p: float) -> float:
    """One-sided normal quantile: ``p = 3e-7`` maps to ``z ~ 5``."""
    if log_p == -np.inf:
        return float("inf")
    return float(-special.ndtri_exp(log_p))


def z_from_p(p: float) -> float:
    return z_from_logp(math.log(p)) if p > 0 else float("inf")


def global_pvalue(min_local_p: float, n_trials: int) -> float:
    """``1 - (1 - p_min)^n``, clamped to ``[p_min, 1]``."""
    if n_trials < 1:
        raise ConfigError("number of trials must be at least 1")
    p = float(-math.expm1(n_trials * math.log1p(-min_local_p))) if min_local_p < 1 else 1.0
    return float(min(1.0, max(min_local_p, p)))


# ---------------------------------------------------------------- scan


@dataclass
class HuntRow:
    window_index: int
    m0: float
    q: Optional[float]
    threshold: Optional[float]
    n_obs: int
    lam: float
    lam_sigma: float
    local_p: float
    local_log_p: float
    z: float
    local_p_conservative: float
    fit: dict

    @property
    def inclusive(self) -> bool:
        return self.q is None


@dataclass
class BumpHuntResult:
    rows: list
    quantiles: tuple
    n_independent: int
    windows: list
    invalid: list = field(default_factory=list)
    min_local_p: float = 1.0
    best: Optional[int] = None
    global_p: float = 1.0
    global_p_mc: Optional[float] = None
    mc_replicas: int = 0
    mc_min_local_p: list = field(default_factory=list)
    global_p_conservative: Optional[float] = None

    def selected_rows(self) -> list:
        return [r for r in self.rows if not r.inclusive]

    def best_row(self) -> Optional[HuntRow]:
        return None if self.best is None else self.rows[self.best]

    def best_window(self) -> Optional[WindowSpec]:
        r = self.best_row()
        return None if r is None else self.windows[r.window_index]

    def inclusive_row(self, window_index: int) -> Optional[HuntRow]:
        for r in self.rows:
            if r.inclusive and r.window_index == window_index:
                return r
        return None

    def to_dict(self) -> dict:
        return _clean(
            {
                "quantiles": list(self.quantiles),
                "n_independent": self.n_independent,
                "windows": [w.to_dict() for w in self.windows],
                "rows": [asdict(r) for r in self.rows],
                "invalid": self.invalid,
                "min_local_p": self.min_local_p,
                "best": self.best,
                "global_p": self.global_p,
                "global_p_conservative": self.global_p_conservative,
                "global_p_mc": self.global_p_mc,
                "mc_replicas": self.mc_replicas,
                "mc_min_local_p": self.mc_min_local_p,
            }
        )


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _row(k, w, q, thr, sb_m, n_obs, bin_width, m_scale) -> HuntRow:
    a, b = w.sr
    if (a > w.domain[0] and not np.any(sb_m < a)) or (b < w.domain[1] and not np.any(sb_m >= b)):
        raise DataError("sideband is empty on one side of the signal region; cannot interpolate")
    fit = fit_background_shape(sb_m, fit_edges(w, sb_m, bin_width), m_scale, exclude=w.sr)
    if not fit.converged:
        raise NumericalError("background fit did not converge")
    lam, sig = expected_sr_count(fit, w)
    if not lam > 0:
        raise NumericalError("non-positive expected count")
    log_p = poisson_logsf(n_obs, lam)
    p = poisson_pvalue(n_obs, lam)
    return HuntRow(
        window_index=k,
        m0=w.m0,
        q=q,
        threshold=thr,
        n_obs=int(n_obs),
        lam=lam,
        lam_sigma=sig,
        local_p=p,
        local_log_p=log_p,
        z=z_from_logp(log_p),
        local_p_conservative=poisson_pvalue(n_obs, lam + sig),
        fit=fit.summary(),
    )


def analyze_window(table: ScoreTable, w: WindowSpec, k: int, quantiles, m_scale: float, bin_width=None):
    """Inclusive row plus one row per quantile; failed rows are reported.

    The inclusive row does not depend on the scores and uses every event;
    selected rows use only hunt-eligible events.
    """
    sb = table.sideband_mask()
    sr = table.region == Region.SR
    hunt = table.hunt_mask()
    rows, failures = [], []
    try:
        rows.append(_row(k, w, None, None, table.m[sb], int(sr.sum()), bin_width, m_scale))
    except ResonanceHuntError as exc:
        failures.append({"window_index": k, "m0": w.m0, "q": None, "error": str(exc)})
    for q in quantiles:
        try:
            thr = quantile_threshold(table, q)
            keep = (table.score > thr) & hunt
            rows.append(_row(k, w, float(q), thr, table.m[sb & keep], int((sr & keep).sum()), bin_width, m_scale))
        except ResonanceHuntError as exc:
            failures.append({"window_index": k, "m0": w.m0, "q": float(q), "error": str(exc)})
    return rows, failures


def _assemble(rows, failures, plan: ScanPlan, quantiles) -> BumpHuntResult:
    res = BumpHuntResult(rows, tuple(quantiles), plan.n_independent, list(plan.windows), failures)
    sel = [i for i, r in enumerate(rows) if not r.inclusive]
    if sel:
        i_best = min(sel, key=lambda i: (rows[i].local_log_p, -rows[i].n_obs, i))
        res.best = i_best
        res.min_local_p = rows[i_best].local_p
        n_trials = plan.n_independent * len(quantiles)
        res.global_p = global_pvalue(res.min_local_p, n_trials)
        res.global_p_conservative = global_pvalue(min(rows[i].local_p_conservative for i in sel), n_trials)
    return res


def hunt_tables(tables: Sequence[ScoreTable], plan: ScanPlan, quantiles=DEFAULT_QUANTILES, *, m_scale=None,
                bin_width=None, mc_calibrate: int = 0, seed: int = 0, threads: int = 1) -> BumpHuntResult:
    """Bump hunt on precomputed score tables (one per plan window).

    Monte Carlo calibration permutes scores relative to ``m`` (one shared
    permutation across windows per replica), which removes any localized
    score excess while keeping the ``m`` spectrum and score distribution.
    """
    tables = list(tables)
    if len(tables) != len(plan):
        raise DataError("need one score table per window")
    if m_scale is None:
        m_scale = default_m_scale(max(float(t.m.max()) for t in tables))

    def run(tabs):
        rows, failures = [], []
        for k, (t, w) in enumerate(zip(tabs, plan.windows)):
            r, f = analyze_window(t, w, k, quantiles, m_scale, bin_width)
            rows.extend(r)
            failures.extend(f)
        return _assemble(rows, failures, plan, quantiles)

    res = run(tables)
    if mc_calibrate:
        n = len(tables[0])

        def replica(r):
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7, r)))
            perm = rng.permutation(n)
            return run([
                ScoreTable(t.score[perm], t.region, t.m, None, t.window, hunt=None if t.hunt is None else t.hunt[perm])
                for t in tables
            ]).min_local_p

        _attach_mc(res, _map(replica, range(mc_calibrate), threads))
    return res


def _map(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _attach_mc(res: BumpHuntResult, mins):
    mins = [float(v) for v in mins]
    res.mc_replicas = len(mins)
    res.mc_min_local_p = mins
    res.global_p_mc = (1 + sum(v <= res.min_local_p for v in mins)) / (1 + len(mins))


Scorer = Callable[[Dataset, WindowSpec], ScoreTable]


def run_bumphunt(ds: Dataset, plan: ScanPlan, scorer: Scorer, quantiles=DEFAULT_QUANTILES, *, m_scale=None,
                 bin_width=None, mc_calibrate: int = 0, seed: int = 0, threads: int = 1) -> BumpHuntResult:
    """Score, cut, fit and test every window of ``plan``.

    ``scorer(ds, w)`` must return scores for every event of ``ds``; it
    only ever sees a label-stripped dataset.  A scorer failure marks its
    window invalid.  With ``mc_calibrate > 0`` the whole scan, scoring
    included, is repeated on replicas where ``m`` is permuted relative to
    ``x``, and the fraction of replicas reaching a smaller minimal local
    p-value gives an empirical global p-value.
    """
    blind = ds.without_labels()
    if m_scale is None:
        m_scale = default_m_scale(float(blind.m.max()))

    def one(args):
        k, w, data = args
        try:
            table = scorer(data, w)
        except ResonanceHuntError as exc:
            return [], [{"window_index": k, "m0": w.m0, "q": None, "error": f"scoring failed: {exc}"}]
        return analyze_window(table, w, k, quantiles, m_scale, bin_width)

    def scan(data):
        outs = _map(one, [(k, w, data) for k, w in enumerate(plan.windows)], threads)
        rows = [r for o in outs for r in o[0]]
        failures = [f for o in outs for f in o[1]]
        return _assemble(rows, failures, plan, quantiles)

    res = scan(blind)
    if mc_calibrate:
        mins = []
        for r in range(mc_calibrate):
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11, r)))
            replica = Dataset(blind.m[rng.permutation(len(blind))], blind.x)
            mins.append(scan(replica).min_local_p)
        _attach_mc(res, mins)
    return res


def estimate_signal_count(res: BumpHuntResult) -> tuple:
    """Signal-count estimate ``(value, sigma)`` from the best window.

    The excess passing the best cut, divided by a data-driven signal
    efficiency (cut excess over inclusive excess), reduces to the
    inclusive signal-region excess ``n_SR - lam``; its error combines the
    Poisson fluctuation of ``n_SR`` with the fit uncertainty on ``lam``.
    """
    best = res.best_row()
    if best is None:
        raise DataError("no valid window in the scan")
    inc = res.inclusive_row(best.window_index)
    if inc is None:
        raise DataError("inclusive fit failed for the best window")
    return inc.n_obs - inc.lam, math.sqrt(inc.n_obs + inc.lam_sigma**2)
