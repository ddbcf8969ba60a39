"""Smooth falling spectra in the resonant feature.

The four-parameter form used throughout is the dijet-style function

    f(m) = a0 * (1 - t)**a1 * t**(a2 + a3 * ln t),    t = m / m_scale,

read as a count density per unit ``m``.  Its logarithm is linear in
``(a1, a2, a3)`` with basis ``(ln(1 - t), ln t, ln(t)**2)``, which gives
closed-form parameter derivatives.
"""

from __future__ import annotations

import numpy as np

from .core import ConfigError, NumericalError

N_KNOTS = 4096

# 8-point Gauss-Legendre rule on [-1, 1]
_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


def default_m_scale(m_max: float) -> float:
    """Scale mapping ``m`` into (0, 1) with headroom below 1."""
    return 1.05 * float(m_max)


def log_basis(m, m_scale: float) -> np.ndarray:
    """Basis ``(ln(1-t), ln t, ln^2 t)`` with shape ``m.shape + (3,)``."""
    t = np.asarray(m, dtype=np.float64) / m_scale
    if np.any((t <= 0) | (t >= 1)):
        raise NumericalError("m / m_scale must lie strictly inside (0, 1)")
    lt = np.log(t)
    return np.stack([np.log1p(-t), lt, lt * lt], axis=-1)


def dijet_shape(m, shape_params, m_scale: float) -> np.ndarray:
    """Unnormalized ``(1-t)**a1 * t**(a2 + a3 ln t)``."""
    a = np.asarray(shape_params, dtype=np.float64)
    return np.exp(log_basis(m, m_scale) @ a)


def dijet_density(m, alpha, m_scale: float) -> np.ndarray:
    """Full four-parameter density ``a0 * shape``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    return alpha[0] * dijet_shape(m, alpha[1:], m_scale)


def gauss_legendre_nodes(edges):
    """Nodes and weights that integrate over each ``[edges[i], edges[i+1]]``.

    Returns ``(nodes, weights)`` of shape ``(n_bins, 8)``.
    """
    edges = np.asarray(edges, dtype=np.float64)
    half = 0.5 * np.diff(edges)[:, None]
    mid = 0.5 * (edges[1:] + edges[:-1])[:, None]
    return mid + half * _GL_X[None, :], half * _GL_W[None, :]


class Spectrum:
    """A normalized falling spectrum on ``domain``, tabulated for sampling.

    Parameters
    ----------
    kind : {"dijet", "exponential"}
    params : sequence of float
        ``(a1, a2, a3)`` for ``"dijet"`` (``a0`` is a pure normalization and
        may be given as a leading fourth entry); ``(slope,)`` for
        ``"exponential"``, density ``exp(-slope * m)``.
    domain : (float, float)
    m_scale : float, optional
        Defaults to ``1.05 * domain[1]``.
    """

    def __init__(self, kind, params, domain, m_scale=None):
        lo, hi = map(float, domain)
        if not 0 < lo < hi:
            raise ConfigError("spectrum domain must satisfy 0 < m_min < m_max")
        params = tuple(float(p) for p in params)
        if kind == "dijet":
            if len(params) == 4:
                params = params[1:]
            if len(params) != 3:
                raise ConfigError("dijet spectrum takes (a1, a2, a3)")
        elif kind == "exponential":
            if len(params) != 1:
                raise ConfigError("exponential spectrum takes (slope,)")
        else:
            raise ConfigError(f"unknown spectrum kind {kind!r}")
        self.kind = kind
        self.params = params
        self.domain = (lo, hi)
        self.m_scale = default_m_scale(hi) if m_scale is None else float(m_scale)
        if kind == "dijet" and self.m_scale <= hi:
            raise ConfigError("m_scale must exceed the domain maximum")

        self.knots = np.linspace(lo, hi, N_KNOTS)
        dens = self._raw(self.knots)
        if not np.all(np.isfinite(dens)) or np.any(dens < 0):
            raise ConfigError("spectrum is not finite and non-negative on the domain")
        cum = np.concatenate(
            [[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(self.knots))]
        )
        if not (np.isfinite(cum[-1]) and cum[-1] > 0):
            raise ConfigError("spectrum is not normalizable on the domain")
        self._norm = cum[-1]
        self._cdf = cum / cum[-1]

    def _raw(self, m):
        m = np.asarray(m, dtype=np.float64)
        if self.kind == "dijet":
            with np.errstate(over="ignore", invalid="ignore"):
                return dijet_shape(m, self.params, self.m_scale)
        return np.exp(-self.params[0] * (m - self.domain[0]))

    def pdf(self, m) -> np.ndarray:
        """Density normalized against the tabulated integral."""
        return self._raw(m) / self._norm

    def cdf(self, m) -> np.ndarray:
        return np.interp(m, self.knots, self._cdf)

    def ppf(self, u) -> np.ndarray:
        """Inverse CDF by linear interpolation of the tabulation."""
        return np.interp(u, self._cdf, self.knots)

    def alpha(self, total: float = 1.0) -> np.ndarray:
        """Four dijet parameters with ``a0`` set so the domain integral is ``total``."""
        if self.kind != "dijet":
            raise ConfigError("alpha() only applies to dijet spectra")
        return np.array([total / self._norm, *self.params])
