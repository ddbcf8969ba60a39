"""End-to-end acceptance checks.

Each test prints one ``criterion N: PASS|FAIL`` line straight to the
terminal.  Run just these with ``pytest -m acceptance``.
"""

import itertools
import logging
import math
import os
import time
from decimal import Decimal, getcontext

import numpy as np
import pytest

from resonance_hunt import bumphunt as bh
from resonance_hunt import cwola, datagen, density
from resonance_hunt import evaluation as ev
from resonance_hunt import ingest
from resonance_hunt.core import Region, WindowSpec, assign_regions
from resonance_hunt.density import HistogramDensity, Standardizer
from resonance_hunt.spectrum import gauss_legendre_nodes
from resonance_hunt.windows import ScanPlan, default_geometry, make_window

pytestmark = pytest.mark.acceptance

DOMAIN = (2.5, 5.5)
W = make_window(3.5, 0.1, 0.3, DOMAIN)


@pytest.fixture(autouse=True)
def _quiet():
    # expected per-window failures in scans are logged as warnings
    logging.disable(logging.WARNING)
    yield
    logging.disable(logging.NOTSET)


@pytest.fixture()
def say(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return emit


def _binomial_limit(n, p=0.05):
    return p + 3 * math.sqrt(p * (1 - p) / n)


# ---------------------------------------------------------------- 1


def test_null_calibration(say):
    delta, eps, _ = default_geometry(DOMAIN)
    plan = ScanPlan.from_windows([make_window(m0, delta, eps, DOMAIN) for m0 in (3.0, 3.4, 3.8)])
    cells, globals_ = {}, []
    t0 = time.time()
    for s in range(200):
        ds = datagen.generate(datagen.preset("null", seed=30_000 + s))
        res = bh.run_bumphunt(ds, plan, lambda d, w: density.anode_scores(d, w))
        for r in res.rows:
            cells.setdefault((r.m0, r.q), []).append(r.local_p)
        globals_.append(res.global_p)
    minutes = (time.time() - t0) / 60
    worst, ok = None, True
    lines = []
    for (m0, q), ps in sorted(cells.items(), key=lambda kv: (kv[0][0], -1 if kv[0][1] is None else kv[0][1])):
        rate, lim = np.mean(np.array(ps) < 0.05), _binomial_limit(len(ps))
        ok &= rate <= lim
        lines.append(f"m0={m0:g} q={q} n={len(ps)} rate={rate:.3f}/{lim:.3f}")
        if worst is None or rate - lim > worst[0]:
            worst = (rate - lim, lines[-1])
    g_rate = np.mean(np.array(globals_) < 0.05)
    ok &= g_rate <= _binomial_limit(len(globals_))
    ok &= minutes < 30
    say(1, ok, f"worst cell {worst[1]}; global rate {g_rate:.3f}; {minutes:.1f} min\n  " + "\n  ".join(lines))
    assert ok


# ---------------------------------------------------------------- 2


def test_cwola_background_only_is_random(say):
    aucs = []
    for seed in range(1, 11):
        ds = datagen.generate(datagen.preset("null", seed=seed))
        t = cwola.cwola_scores(ds, W, cwola.ClassifierConfig(seed=seed))
        sel = np.isin(t.region, [Region.SR, Region.SS]) & t.hunt
        aucs.append(ev.auc(ev.roc(t.score[sel], (t.region[sel] == Region.SR).astype(int))))
    inside = sum(0.48 <= a <= 0.52 for a in aucs)
    ok = inside >= 9
    say(2, ok, f"{inside}/10 held-out SR-vs-SS AUCs in [0.48, 0.52]: " + " ".join(f"{a:.3f}" for a in aucs))
    assert ok


# ---------------------------------------------------------------- 3


def test_anode_unit_ratio(say):
    ds = datagen.generate(datagen.preset("default", n_signal=0, seed=7))
    t = density.anode_scores(ds, W)
    sel = (t.region == Region.SR) & t.hunt
    med = float(np.median(t.score[sel]))
    ok = -0.1 <= med <= 0.1
    say(3, ok, f"median log-ratio {med:+.4f} over {int(sel.sum())} held-out SR events")
    assert ok


# ---------------------------------------------------------------- 4


def _pairwise_auc(s, y):
    sig, bkg = s[y == 1], s[y == 0]
    return sum(np.sum(a > bkg) + 0.5 * np.sum(a == bkg) for a in sig) / (len(sig) * len(bkg))


def _count_and_divide(Z, edges):
    shape = [len(e) - 1 for e in edges]
    out = []
    for cell in itertools.product(*(range(k) for k in shape)):
        inside = np.ones(len(Z), bool)
        for j, k in enumerate(cell):
            if k > 0:
                inside &= Z[:, j] >= edges[j][k]
            if k < shape[j] - 1:
                inside &= Z[:, j] < edges[j][k + 1]
        out.append(inside.sum() / len(Z))
    return np.array(out)


def _direct_sf(n, lam):
    getcontext().prec = 60
    lam = Decimal(repr(lam))
    term, lower = (-lam).exp(), Decimal(0)
    for k in range(n):
        lower += term
        term = term * lam / (k + 1)
    return float(1 - lower)


def test_oracle_equivalence(say):
    rng = np.random.default_rng(2024)
    auc_ok = 0
    for i in range(100):
        n = int(rng.integers(2, 1001))
        s = rng.integers(0, 30, n).astype(float) if i % 2 else rng.normal(size=n)
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        auc_ok += ev.auc(ev.roc(s, y)) == _pairwise_auc(s, y)
    hist_ok = 0
    for _ in range(50):
        d, bins, n = int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(10, 1001))
        Z = np.round(rng.normal(size=(n, d)), 1)
        edges = HistogramDensity.grid(Z, bins)
        h = HistogramDensity.fit(Z, edges, Standardizer(np.zeros(d), np.ones(d)))
        hist_ok += np.array_equal(h.prob, _count_and_divide(Z, edges))
    worst = 0.0
    for _ in range(300):
        lam, n = float(rng.uniform(0.01, 50.0)), int(rng.integers(0, 130))
        worst = max(worst, abs(bh.poisson_pvalue(n, lam) - _direct_sf(n, lam)))
    ok = auc_ok == 100 and hist_ok == 50 and worst <= 1e-12
    say(4, ok, f"AUC {auc_ok}/100 exact; histogram {hist_ok}/50 exact; Poisson max |diff| {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 5


def test_significance_amplification(say):
    # independent labeled development sample, signal-enriched, SR only
    dev = datagen.generate(datagen.preset("default", n_background=300_000, n_signal=15_000, seed=999))
    sup = cwola.train_supervised(dev, window=W)
    passed, lines = 0, []
    for seed in range(1, 11):
        ds = datagen.generate(datagen.preset("default", seed=seed))
        sr = assign_regions(ds.m, W) == Region.SR
        y = ds.labels[sr]
        tables = {
            # every score is out-of-fold; ROC metrics do not need the holdout split
            "anode": density.anode_scores(ds, W, density.AnodeConfig(scheme="kfold")),
            "cwola": cwola.cwola_scores(ds, W, scheme="kfold"),
            "supervised": cwola.score(sup, ds, W),
        }
        sic = {k: ev.sic_curve(ev.roc(t.score[sr], y)).max_sic for k, t in tables.items()}
        good = sic["anode"] >= 5 and sic["cwola"] >= 5 and sic["supervised"] > max(sic["anode"], sic["cwola"])
        passed += good
        lines.append(f"seed {seed}: " + " ".join(f"{k}={v:.2f}" for k, v in sic.items()) + ("" if good else "  <-"))
    ok = passed >= 8
    say(5, ok, f"{passed}/10 seeds with ANODE, CWoLa >= 5 and supervised highest\n  " + "\n  ".join(lines))
    assert ok


# ---------------------------------------------------------------- 6


def test_localization_and_signal_count(say):
    plan = ScanPlan.from_windows([make_window(2.9 + 0.3 * k, 0.1, 0.3, DOMAIN) for k in range(8)])
    found, pulls = 0, []
    for seed in range(20):
        cfg = datagen.preset("default", seed=500 + seed)
        ds = datagen.generate(cfg)
        res = bh.run_bumphunt(ds, plan, lambda d, w: density.anode_scores(d, w))
        key = datagen.SealedKey(np.asarray(ds.labels), ds.n_signal(), cfg.signal_m0, cfg.signal_width, "", len(ds))
        key.seal = key.compute_seal()
        rep = ev.compare_to_key(res, bh.estimate_signal_count(res), key)
        found += rep["localized"]
        pulls.append(rep["pull"])
    in_range = sum(abs(p) <= 3 for p in pulls)
    ok = found >= 18 and in_range >= 18
    say(6, ok, f"localized {found}/20; |pull| <= 3 in {in_range}/20; pulls " + " ".join(f"{p:+.2f}" for p in pulls))
    assert ok


# ---------------------------------------------------------------- 7


def test_background_fit_quality(say):
    edges = bh.sideband_edges(W)
    ks_pass, round_trip = 0, 0
    for seed in range(50):
        cfg = datagen.preset("null", seed=700 + seed)
        ds = datagen.generate(cfg)
        sb = ds.m[assign_regions(ds.m, W) != Region.SR]
        fit = bh.fit_background_shape(sb, edges, cfg.spectrum().m_scale, exclude=W.sr)
        ks_pass += fit.ks_pvalue > 0.05
        nodes, weights = gauss_legendre_nodes(edges)
        truth = len(ds) * np.sum(weights * cfg.spectrum().pdf(nodes), axis=1)
        use = fit.fit_mask
        round_trip += bool(fit.converged and np.all(np.abs(fit.bin_expectations()[use] - truth[use]) <= 3 * np.sqrt(truth[use])))
    ok = ks_pass >= 45 and round_trip == 50
    say(7, ok, f"KS p > 0.05 in {ks_pass}/50; all bins within 3 sigma of truth in {round_trip}/50")
    assert ok


# ---------------------------------------------------------------- 8


LHCO = os.environ.get("RESONANCE_HUNT_LHCO")


@pytest.mark.skipif(not (LHCO and os.path.exists(LHCO)), reason="set RESONANCE_HUNT_LHCO to a CSV of the LHCO R&D high-level features")
def test_lhco_optional(say):
    ds = ingest.read_csv(LHCO, ingest.LHCO_SCHEMA)
    w = WindowSpec(3.5, 0.2, 0.6, (float(ds.m.min()), float(ds.m.max())))
    # half the events as a labeled development sample, half analyzed blind
    dev_mask = np.random.default_rng(0).random(len(ds)) < 0.5
    dev, data = ds.subset(dev_mask), ds.subset(~dev_mask)
    t = cwola.cwola_scores(data, w)
    sel = (t.region == Region.SR) & t.hunt
    c_auc = ev.auc(ev.roc(t.score[sel], data.labels[sel]))
    c_sic = ev.sic_curve(ev.roc(t.score[sel], data.labels[sel])).max_sic
    sup = cwola.score(cwola.train_supervised(dev, window=w), data, w)
    s_auc = ev.auc(ev.roc(sup.score[sel], data.labels[sel]))
    bkg = data.labels == 0
    blind = np.isin(t.region, [Region.SR, Region.SS]) & t.hunt & bkg
    sb_auc = ev.auc(ev.roc(t.score[blind], (t.region[blind] == Region.SR).astype(int)))
    ok = s_auc > c_auc > 0.5 and 0.47 <= sb_auc <= 0.53 and c_sic >= 5
    say(8, ok, f"supervised AUC {s_auc:.3f}, CWoLa AUC {c_auc:.3f}, background SR-vs-SS AUC {sb_auc:.3f}, CWoLa max SIC {c_sic:.2f}")
    assert ok
