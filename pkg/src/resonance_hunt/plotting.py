"""Static SVG figures: ROC and SIC panels, sideband fits and scan p-values.

Output is byte-stable for identical inputs (fixed SVG id salt, no date
metadata) so figures can be diffed and checked into manifests.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "svg.hashsalt": "resonance-hunt",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.figsize": (4.8, 3.6),
    "lines.linewidth": 1.4,
}


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def roc_figure(curves: dict, path):
    """Background rejection ``1/FPR`` against signal efficiency."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, c in curves.items():
            fpr, tpr = c.fpr, c.tpr
            keep = fpr > 0
            ax.plot(tpr[keep], 1.0 / fpr[keep], label=name)
        ax.set_yscale("log")
        ax.set_xlabel("signal efficiency (TPR)")
        ax.set_ylabel("background rejection (1/FPR)")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def sic_figure(curves: dict, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, s in curves.items():
            ax.plot(s.tpr, s.sic, label=f"{name} (max {s.max_sic:.1f})")
        ax.axhline(1.0, color="grey", lw=0.8, ls=":")
        ax.set_xlabel("signal efficiency (TPR)")
        ax.set_ylabel("TPR / sqrt(FPR)")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def fit_figure(m_values, fit, window, path, title=None):
    """Sideband histogram with the fitted spectrum; the SR is shaded."""
    edges = fit.edges
    counts = np.histogram(m_values, bins=edges)[0]
    centers = 0.5 * (edges[1:] + edges[:-1])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        use = fit.fit_mask
        ax.errorbar(centers[use], counts[use], yerr=np.sqrt(counts[use]), fmt="o", ms=2.5, color="k", label="sideband")
        fine = np.linspace(edges[0], edges[-1], 400)
        width = np.median(np.diff(edges)[use])
        ax.plot(fine, fit.density(fine) * width, color="C3", label="fit")
        a, b = window.sr
        ax.axvspan(a, b, color="C0", alpha=0.15, label="SR")
        if np.any(~use):
            ax.plot(centers[~use], counts[~use], "s", ms=3, mfc="none", color="C0", label="SR data")
        ax.set_yscale("log")
        ax.set_xlabel("m")
        ax.set_ylabel("events / bin")
        ax.set_title(title or f"chi2/ndf = {fit.chi2:.1f}/{fit.ndf}, KS p = {fit.ks_pvalue:.2f}")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def _z(r):
    return float(np.clip(r.z, 0.0, 40.0))


def scan_figure(result, path):
    """Local significance per window, one line per quantile."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for q in result.quantiles:
            rows = sorted((r for r in result.rows if r.q == q), key=lambda r: r.m0)
            if rows:
                ax.plot([r.m0 for r in rows], [_z(r) for r in rows], "o-", ms=3, label=f"q = {q:g}")
        rows = sorted((r for r in result.rows if r.inclusive), key=lambda r: r.m0)
        if rows:
            ax.plot([r.m0 for r in rows], [_z(r) for r in rows], "k--", lw=0.8, label="no cut")
        ax.set_xlabel("window centre m0")
        ax.set_ylabel("local significance z")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
