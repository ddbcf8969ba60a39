"""Seeded toy data with a rare resonant anomaly.

Background events have ``m`` drawn from a smooth falling spectrum and
features ``x | m`` drawn from independent unit Gaussians whose means drift
linearly in ``m``.  Signal events sit in a narrow Gaussian peak in ``m``
with shifted and rescaled feature Gaussians.

Random numbers come from counter-keyed Philox streams: event block ``c``
of stream ``s`` is seeded from ``(seed, s, c)`` alone, so output does not
depend on how blocks are scheduled.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import integrate, special

from .core import ConfigError, Dataset, DataError, DigestMismatchError
from .spectrum import Spectrum

BLOCK = 1 << 16

_STREAM_BACKGROUND = 0
_STREAM_SIGNAL = 1
_STREAM_SHUFFLE = 2

# Signal feature displacement (in background widths) per difficulty level.
DIFFICULTY_SHIFTS = {
    "trivial": 4.0,
    "easy": 2.5,
    "detectable": 1.5,
    "hard": 1.0,
    "invisible": 0.0,
}
# Signal feature width (in background widths) at every visible level.
SIGNAL_SCALE = 0.8


@dataclass(frozen=True)
class ToyConfig:
    n_background: int = 1_000_000
    n_signal: int = 834
    m_domain: tuple = (2.5, 5.5)
    background_shape: dict = field(
        default_factory=lambda: {"kind": "dijet", "params": [2.0, -6.0, 0.0]}
    )
    signal_m0: float = 3.5
    signal_width: float = 0.05
    d: int = 4
    background_feature_drift: tuple = (0.02, -0.02, 0.01, 0.0)
    signal_feature_shift: tuple = (1.5, 1.5, 1.5, 1.5)
    signal_feature_scale: tuple = (0.8, 0.8, 0.8, 0.8)
    seed: int = 0
    max_signal_fraction: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "m_domain", tuple(float(v) for v in self.m_domain))
        for name in ("background_feature_drift", "signal_feature_shift", "signal_feature_scale"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        object.__setattr__(self, "background_shape", dict(self.background_shape))
        self.validate()

    def validate(self):
        lo, hi = self.m_domain
        span = hi - lo
        if self.n_background < 0 or self.n_signal < 0:
            raise ConfigError("event counts must be non-negative")
        if self.n_background + self.n_signal == 0:
            raise ConfigError("no events requested")
        if not 0 < lo < hi:
            raise ConfigError("m_domain must satisfy 0 < m_min < m_max")
        if self.d < 1:
            raise ConfigError("d must be at least 1")
        for name in ("background_feature_drift", "signal_feature_shift", "signal_feature_scale"):
            if len(getattr(self, name)) != self.d:
                raise ConfigError(f"{name} must have d={self.d} entries")
        frac = self.n_signal / (self.n_signal + self.n_background)
        if frac >= self.max_signal_fraction:
            raise ConfigError(
                f"rarity violated: signal fraction {frac:.4g} >= {self.max_signal_fraction}"
            )
        if not lo <= self.signal_m0 <= hi:
            raise ConfigError("signal_m0 outside m_domain")
        if not 0 < self.signal_width <= 0.1 * span:
            raise ConfigError("resonance violated: signal_width must be in (0, 0.1 * span]")
        scale = np.asarray(self.signal_feature_scale)
        shift = np.asarray(self.signal_feature_shift)
        if not (np.all(scale > 0) and np.all(np.isfinite(shift))):
            raise ConfigError("overlap violated: feature scales must be positive and shifts finite")
        if np.any(overlap_coefficient(shift, scale) <= 0):
            raise ConfigError("overlap violated: signal and background features are disjoint")
        drift = np.abs(np.asarray(self.background_feature_drift))
        if np.any(drift * span >= 0.2):
            raise ConfigError("smoothness violated: feature means drift by >= 0.2 sigma across the domain")
        self.spectrum()

    def spectrum(self) -> Spectrum:
        shape = self.background_shape
        try:
            return Spectrum(shape["kind"], shape["params"], self.m_domain)
        except KeyError as exc:
            raise ConfigError(f"background_shape missing {exc}") from None

    @property
    def m_center(self) -> float:
        return 0.5 * sum(self.m_domain)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyConfig":
        return cls(**d)


def preset(name: str = "default", **overrides) -> ToyConfig:
    """Named configurations.

    ``default`` mirrors the challenge scale (1M background, 834 signal,
    four features) with the ``detectable`` signal shift.  ``small`` keeps
    the same shapes at 100k background events.  Any keyword overrides a
    field; ``difficulty=<level>`` sets a uniform signal shift from
    :data:`DIFFICULTY_SHIFTS`.
    """
    base = {}
    if name == "small":
        base["n_background"] = 100_000
        base["n_signal"] = 834
    elif name == "null":
        base["n_background"] = 100_000
        base["n_signal"] = 0
    elif name != "default":
        raise ConfigError(f"unknown preset {name!r}")
    difficulty = overrides.pop("difficulty", None)
    base.update(overrides)
    d = base.get("d", 4)
    if difficulty is not None:
        if difficulty not in DIFFICULTY_SHIFTS:
            raise ConfigError(f"unknown difficulty {difficulty!r}")
        base["signal_feature_shift"] = (DIFFICULTY_SHIFTS[difficulty],) * d
        if DIFFICULTY_SHIFTS[difficulty] == 0.0:
            base["signal_feature_scale"] = (1.0,) * d
    if d != 4:
        base.setdefault("background_feature_drift", (0.0,) * d)
        base.setdefault("signal_feature_shift", (DIFFICULTY_SHIFTS["detectable"],) * d)
        base.setdefault("signal_feature_scale", (SIGNAL_SCALE,) * d)
    return ToyConfig(**base)


def overlap_coefficient(shift, scale) -> np.ndarray:
    """Overlap of N(0, 1) and N(shift, scale), integrated numerically."""
    shift = np.atleast_1d(np.asarray(shift, dtype=np.float64))
    scale = np.atleast_1d(np.asarray(scale, dtype=np.float64))
    out = np.empty(shift.shape)
    for i, (mu, s) in enumerate(zip(shift, scale)):
        grid = np.linspace(min(-12.0, mu - 12 * s), max(12.0, mu + 12 * s), 20001)
        a = np.exp(-0.5 * grid**2) / np.sqrt(2 * np.pi)
        b = np.exp(-0.5 * ((grid - mu) / s) ** 2) / (s * np.sqrt(2 * np.pi))
        out[i] = integrate.trapezoid(np.minimum(a, b), grid)
    return out


def _block_rng(seed: int, stream: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & ((1 << 64) - 1), spawn_key=(stream, block))
    return np.random.Generator(np.random.Philox(ss))


def _blocks(n: int):
    for b, start in enumerate(range(0, n, BLOCK)):
        yield b, start, min(n, start + BLOCK)


def feature_means(cfg: ToyConfig, m) -> np.ndarray:
    """Background conditional feature means ``E[x | m]``, shape ``(n, d)``."""
    m = np.asarray(m, dtype=np.float64)
    drift = np.asarray(cfg.background_feature_drift)
    return (m - cfg.m_center)[:, None] * drift[None, :]


def generate_background(cfg: ToyConfig) -> Dataset:
    spec = cfg.spectrum()
    n = cfg.n_background
    m = np.empty(n)
    x = np.empty((n, cfg.d))
    for b, i, j in _blocks(n):
        rng = _block_rng(cfg.seed, _STREAM_BACKGROUND, b)
        m[i:j] = spec.ppf(rng.random(j - i))
        x[i:j] = rng.standard_normal((j - i, cfg.d))
    x += feature_means(cfg, m)
    return Dataset(m, x, np.zeros(n, dtype=np.int8))


def generate_signal(cfg: ToyConfig) -> Dataset:
    lo, hi = cfg.m_domain
    if not lo <= cfg.signal_m0 <= hi:
        raise ConfigError("signal_m0 outside m_domain")
    n = cfg.n_signal
    a = special.ndtr((lo - cfg.signal_m0) / cfg.signal_width)
    c = special.ndtr((hi - cfg.signal_m0) / cfg.signal_width)
    m = np.empty(n)
    z = np.empty((n, cfg.d))
    for b, i, j in _blocks(n):
        rng = _block_rng(cfg.seed, _STREAM_SIGNAL, b)
        u = a + (c - a) * rng.random(j - i)
        m[i:j] = cfg.signal_m0 + cfg.signal_width * special.ndtri(u)
        z[i:j] = rng.standard_normal((j - i, cfg.d))
    np.clip(m, lo, hi, out=m)
    shift = np.asarray(cfg.signal_feature_shift)
    scale = np.asarray(cfg.signal_feature_scale)
    x = feature_means(cfg, m) + shift + scale * z
    return Dataset(m, x, np.ones(n, dtype=np.int8))


def mix_and_shuffle(bkg: Dataset, sig: Dataset, seed: int) -> Dataset:
    if bkg.d != sig.d:
        raise DataError(f"dimension mismatch: {bkg.d} vs {sig.d}")
    both = Dataset.concatenate([bkg, sig])
    perm = _block_rng(seed, _STREAM_SHUFFLE, 0).permutation(len(both))
    return both.subset(perm)


def generate(cfg: ToyConfig) -> Dataset:
    """Shuffled, labeled background + signal sample."""
    return mix_and_shuffle(generate_background(cfg), generate_signal(cfg), cfg.seed)


@dataclass
class SealedKey:
    labels: np.ndarray
    signal_count: int
    m0: float
    width: float
    digest: str
    n_events: int = 0
    seal: Optional[str] = None

    def _payload(self) -> dict:
        return {
            "signal_count": int(self.signal_count),
            "m0": float(self.m0),
            "width": float(self.width),
            "digest": self.digest,
            "n_events": int(self.n_events),
            "labels_digest": _labels_digest(self.labels),
        }

    def compute_seal(self) -> str:
        blob = json.dumps(self._payload(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def verify(self, data_path=None):
        """Check the key's own seal and, if given, the bound data file."""
        if self.seal is not None and self.seal != self.compute_seal():
            raise DigestMismatchError("sealed key has been modified")
        if data_path is not None:
            actual = file_digest(data_path)
            if actual != self.digest:
                raise DigestMismatchError(
                    f"{data_path}: digest {actual[:12]}... does not match key {self.digest[:12]}..."
                )

    def save(self, path):
        path = Path(path)
        labels_path = path.with_name(path.stem + ".labels.csv")
        with open(labels_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("label\n")
            fh.write("\n".join(str(int(v)) for v in self.labels))
            fh.write("\n")
        header = dict(self._payload(), seal=self.compute_seal(), labels_file=labels_path.name)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(header, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SealedKey":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            header = json.load(fh)
        labels = np.loadtxt(path.with_name(header["labels_file"]), skiprows=1, dtype=np.int8, ndmin=1)
        key = cls(
            labels=labels,
            signal_count=header["signal_count"],
            m0=header["m0"],
            width=header["width"],
            digest=header["digest"],
            n_events=header["n_events"],
            seal=header.get("seal"),
        )
        if header.get("labels_digest") != _labels_digest(labels):
            raise DigestMismatchError("key labels do not match the key header")
        return key


def _labels_digest(labels) -> str:
    return hashlib.sha256(np.asarray(labels, dtype=np.int8).tobytes()).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def default_key_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".key.json")


def emit_blackbox(cfg: ToyConfig, path, key_path=None) -> SealedKey:
    """Write an unlabeled dataset to ``path`` and its sealed key beside it."""
    from .ingest import default_schema, write_csv

    ds = generate(cfg)
    try:
        write_csv(ds.without_labels(), path, default_schema(cfg.d, labeled=False))
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
    key = SealedKey(
        labels=np.asarray(ds.labels),
        signal_count=ds.n_signal(),
        m0=cfg.signal_m0,
        width=cfg.signal_width,
        digest=file_digest(path),
        n_events=len(ds),
    )
    key.seal = key.compute_seal()
    key_path = default_key_path(path) if key_path is None else key_path
    os.makedirs(os.path.dirname(os.path.abspath(key_path)), exist_ok=True)
    key.save(key_path)
    return key
