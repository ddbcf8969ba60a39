import json

import numpy as np
import pytest
from scipy import stats

from resonance_hunt import datagen, ingest
from resonance_hunt.core import ConfigError, DataError, Dataset, DigestMismatchError


def small(**kw):
    base = dict(n_background=20_000, n_signal=200, seed=7)
    base.update(kw)
    return datagen.preset("default", **base)


def test_background_moments_without_drift():
    cfg = small(n_background=100_000, background_feature_drift=(0.0,) * 4)
    ds = datagen.generate_background(cfg)
    n = len(ds)
    assert np.all(np.abs(ds.x.mean(axis=0)) < 5 / np.sqrt(n))
    assert np.all(ds.labels == 0)


def test_generation_is_deterministic():
    a = datagen.generate(small())
    b = datagen.generate(small())
    assert a == b
    assert a.digest() == b.digest()
    assert datagen.generate(small(seed=8)) != a


def test_background_m_follows_spectrum():
    cfg = small(n_background=50_000)
    ds = datagen.generate_background(cfg)
    spec = cfg.spectrum()
    assert stats.kstest(ds.m, spec.cdf).pvalue > 0.01


def test_exponential_spectrum():
    cfg = small(background_shape={"kind": "exponential", "params": [1.5]})
    ds = datagen.generate_background(cfg)
    lo, hi = cfg.m_domain

    def cdf(m):
        return (1 - np.exp(-1.5 * (m - lo))) / (1 - np.exp(-1.5 * (hi - lo)))

    assert stats.kstest(ds.m, cdf).pvalue > 0.01


def test_non_normalizable_spectrum_rejected():
    with pytest.raises(ConfigError):
        small(background_shape={"kind": "dijet", "params": [2.0, -6.0, 1e4]})
    with pytest.raises(ConfigError):
        small(background_shape={"kind": "sigmoid", "params": [1.0]})


def test_signal_is_narrow_and_exact_count():
    cfg = small(n_signal=834)
    sig = datagen.generate_signal(cfg)
    assert len(sig) == 834
    assert np.all(sig.labels == 1)
    # coverage of 3 widths checked on a large sample, where binomial noise is ~5e-5
    big = datagen.generate_signal(small(n_background=1, n_signal=1_000_000, max_signal_fraction=1.0))
    assert np.mean(np.abs(big.m - cfg.signal_m0) < 0.15) > 0.997


def test_unshifted_signal_matches_background_features():
    cfg = small(n_signal=5000, max_signal_fraction=0.5, signal_feature_shift=(0.0,) * 4,
                signal_feature_scale=(1.0,) * 4, background_feature_drift=(0.0,) * 4)
    sig = datagen.generate_signal(cfg)
    bkg = datagen.generate_background(cfg)
    for j in range(cfg.d):
        assert stats.ks_2samp(sig.x[:, j], bkg.x[:, j]).pvalue > 0.01


def test_signal_m0_outside_domain():
    with pytest.raises(ConfigError):
        small(signal_m0=7.0)


@pytest.mark.parametrize(
    "kw, clause",
    [
        (dict(n_signal=5000, n_background=10_000), "rarity"),
        (dict(signal_width=1.0), "resonance"),
        (dict(signal_feature_scale=(0.0, 1, 1, 1)), "overlap"),
        (dict(background_feature_drift=(0.1, 0, 0, 0)), "smoothness"),
    ],
)
def test_assumption_checks(kw, clause):
    with pytest.raises(ConfigError, match=clause):
        small(**kw)


def test_mix_and_shuffle_is_a_permutation():
    cfg = small(n_background=100_000, n_signal=834)
    bkg = datagen.generate_background(cfg)
    sig = datagen.generate_signal(cfg)
    mixed = datagen.mix_and_shuffle(bkg, sig, seed=3)
    assert len(mixed) == 100_834
    assert mixed.n_signal() == 834
    before = Dataset.concatenate([bkg, sig])
    key = lambda d: np.lexsort(np.column_stack([d.m, d.x, d.labels]).T)
    np.testing.assert_array_equal(
        np.column_stack([before.m, before.x])[key(before)],
        np.column_stack([mixed.m, mixed.x])[key(mixed)],
    )


def test_mix_dimension_mismatch():
    a = datagen.generate_background(small(n_background=10_000))
    b = Dataset(np.full(3, 3.5), np.zeros((3, 2)), np.ones(3))
    with pytest.raises(DataError):
        datagen.mix_and_shuffle(a, b, 0)


def test_smoothness_of_conditional_means():
    cfg = small(n_background=200_000)
    ds = datagen.generate_background(cfg)
    edges = np.linspace(*cfg.m_domain, 7)
    idx = np.digitize(ds.m, edges[1:-1])
    drift = np.array(cfg.background_feature_drift)
    width = edges[1] - edges[0]
    for b in range(len(edges) - 2):
        x0, x1 = ds.x[idx == b], ds.x[idx == b + 1]
        if len(x0) < 100 or len(x1) < 100:
            continue
        diff = np.abs(x1.mean(axis=0) - x0.mean(axis=0))
        se = np.sqrt(1 / len(x0) + 1 / len(x1))
        assert np.all(diff < np.abs(drift) * 2 * width + 5 * se)


def test_signal_support_inside_background_support():
    cfg = small(n_background=100_000, n_signal=2000)
    bkg = datagen.generate_background(cfg)
    sig = datagen.generate_signal(cfg)
    lo = bkg.x.min(axis=0) - 3
    hi = bkg.x.max(axis=0) + 3
    assert np.all(sig.x >= lo) and np.all(sig.x <= hi)


def test_blackbox_and_key(tmp_path):
    cfg = small()
    path = tmp_path / "bb.csv"
    key = datagen.emit_blackbox(cfg, path)
    header = path.read_text().splitlines()[0].split(",")
    assert "label" not in header
    assert key.signal_count == cfg.n_signal
    loaded = datagen.SealedKey.load(datagen.default_key_path(path))
    loaded.verify(path)
    np.testing.assert_array_equal(loaded.labels, key.labels)
    ds = ingest.read_csv(path, ingest.default_schema(cfg.d, labeled=False))
    assert len(ds) == key.n_events


def test_tampered_file_fails_digest(tmp_path):
    path = tmp_path / "bb.csv"
    datagen.emit_blackbox(small(), path)
    with open(path, "a") as fh:
        fh.write("3.5,0,0,0,0\n")
    key = datagen.SealedKey.load(datagen.default_key_path(path))
    with pytest.raises(DigestMismatchError):
        key.verify(path)


def test_tampered_key_fails_seal(tmp_path):
    path = tmp_path / "bb.csv"
    datagen.emit_blackbox(small(), path)
    kp = datagen.default_key_path(path)
    header = json.loads(kp.read_text())
    header["signal_count"] += 1
    kp.write_text(json.dumps(header))
    with pytest.raises(DigestMismatchError):
        datagen.SealedKey.load(kp).verify()


def test_presets():
    assert datagen.preset("default").n_signal == 834
    assert datagen.preset("null").n_signal == 0
    cfg = datagen.preset("small", difficulty="hard")
    assert cfg.signal_feature_shift == (datagen.DIFFICULTY_SHIFTS["hard"],) * 4
    with pytest.raises(ConfigError):
        datagen.preset("huge")


def test_block_seeding_independent_of_size():
    a = datagen.generate_background(small(n_background=70_000))
    b = datagen.generate_background(small(n_background=140_000))
    np.testing.assert_array_equal(a.m[:65_536], b.m[:65_536])
