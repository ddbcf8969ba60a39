"""Domain types and region algebra shared by every stage.

A :class:`Dataset` is a columnar, read-only table holding the resonant
feature ``m``, an ``(n, d)`` block of auxiliary features ``x`` and an
optional 0/1 truth label (1 = signal).  A :class:`WindowSpec` splits the
``m`` axis into a signal region (SR), a short sideband (SS) adjacent to it
and the remaining far sideband (FarSB).
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

__all__ = [
    "ResonanceHuntError",
    "ConfigError",
    "DataError",
    "NumericalError",
    "OutOfDomainError",
    "DegenerateWindowError",
    "DigestMismatchError",
    "Label",
    "Event",
    "Dataset",
    "WindowSpec",
    "Region",
    "ScoreTable",
    "assign_region",
    "assign_regions",
    "partition",
]


class ResonanceHuntError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(ResonanceHuntError, ValueError):
    exit_code = 1


class DataError(ResonanceHuntError, ValueError):
    exit_code = 2


class NumericalError(ResonanceHuntError, ArithmeticError):
    exit_code = 3


class OutOfDomainError(DataError):
    pass


class DegenerateWindowError(DataError):
    pass


class DigestMismatchError(DataError):
    pass


class Label(enum.IntEnum):
    BACKGROUND = 0
    SIGNAL = 1


class Region(enum.IntEnum):
    SR = 0
    SS = 1
    FarSB = 2


class Event(NamedTuple):
    m: float
    x: tuple
    label: Optional[Label] = None


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


class Dataset:
    """Immutable columnar event table.

    Parameters
    ----------
    m : array_like, shape (n,)
        Resonant feature, strictly positive.
    x : array_like, shape (n, d)
        Auxiliary features.
    labels : array_like of {0, 1}, optional
        Truth labels.  ``None`` means the dataset is unlabeled.
    """

    __slots__ = ("_m", "_x", "_labels")

    def __init__(self, m, x, labels=None):
        m = np.asarray(m, dtype=np.float64)
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(len(m), -1) if len(m) else x.reshape(0, 0)
        if m.ndim != 1 or x.ndim != 2 or x.shape[0] != m.shape[0]:
            raise DataError(
                f"shape mismatch: m {m.shape} vs x {x.shape}"
            )
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(x))):
            raise DataError("non-finite entries in dataset")
        if np.any(m <= 0):
            raise DataError("resonant feature m must be strictly positive")
        if labels is not None:
            labels = np.asarray(labels)
            if labels.shape != m.shape:
                raise DataError("labels must have one entry per event")
            if not np.all((labels == 0) | (labels == 1)):
                raise DataError("labels must be 0 (background) or 1 (signal)")
            labels = labels.astype(np.int8)
        self._m = _frozen(m)
        self._x = _frozen(x)
        self._labels = None if labels is None else _frozen(labels)

    @property
    def m(self) -> np.ndarray:
        return self._m

    @property
    def x(self) -> np.ndarray:
        return self._x

    @property
    def labels(self) -> Optional[np.ndarray]:
        return self._labels

    @property
    def d(self) -> int:
        return self._x.shape[1]

    @property
    def labeled(self) -> bool:
        return self._labels is not None

    def __len__(self) -> int:
        return self._m.shape[0]

    def __getitem__(self, i: int) -> Event:
        label = None if self._labels is None else Label(int(self._labels[i]))
        return Event(float(self._m[i]), tuple(self._x[i].tolist()), label)

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        if self.labeled != other.labeled:
            return False
        same = np.array_equal(self._m, other._m) and np.array_equal(self._x, other._x)
        if self.labeled:
            same = same and np.array_equal(self._labels, other._labels)
        return bool(same)

    __hash__ = None

    def __repr__(self) -> str:
        return f"Dataset(n={len(self)}, d={self.d}, labeled={self.labeled})"

    def subset(self, index) -> "Dataset":
        """Rows selected by a boolean mask or an integer index array."""
        labels = None if self._labels is None else self._labels[index]
        return Dataset(self._m[index], self._x[index], labels)

    def without_labels(self) -> "Dataset":
        """Label-stripped view (the label firewall for scoring stages)."""
        if self._labels is None:
            return self
        return Dataset(self._m, self._x, None)

    def with_labels(self, labels) -> "Dataset":
        return Dataset(self._m, self._x, labels)

    def n_signal(self) -> int:
        if self._labels is None:
            raise DataError("dataset is unlabeled")
        return int(self._labels.sum())

    def digest(self) -> str:
        """SHA-256 over the raw column bytes; identifies a dataset in memory."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self._m).tobytes())
        h.update(np.ascontiguousarray(self._x).tobytes())
        if self._labels is not None:
            h.update(self._labels.tobytes())
        return h.hexdigest()

    @classmethod
    def from_events(cls, events: Sequence[Event], d: Optional[int] = None) -> "Dataset":
        events = list(events)
        if not events:
            return cls(np.empty(0), np.empty((0, d or 0)))
        dims = {len(e.x) for e in events}
        if len(dims) != 1 or (d is not None and dims != {d}):
            raise DataError("inconsistent feature dimension across events")
        has = {e.label is not None for e in events}
        if len(has) != 1:
            raise DataError("either all events carry a label or none does")
        labels = [int(e.label) for e in events] if has == {True} else None
        return cls([e.m for e in events], [e.x for e in events], labels)

    @staticmethod
    def concatenate(parts: Sequence["Dataset"]) -> "Dataset":
        parts = list(parts)
        if len({p.d for p in parts}) > 1:
            raise DataError("dimension mismatch between datasets")
        if len({p.labeled for p in parts}) > 1:
            raise DataError("cannot mix labeled and unlabeled datasets")
        labels = np.concatenate([p.labels for p in parts]) if parts[0].labeled else None
        return Dataset(
            np.concatenate([p.m for p in parts]),
            np.concatenate([p.x for p in parts]),
            labels,
        )


@dataclass(frozen=True)
class WindowSpec:
    """Signal region ``|m - m0| < delta`` within ``domain``."""

    m0: float
    delta: float
    epsilon: float
    domain: tuple

    def __post_init__(self):
        lo, hi = self.domain
        object.__setattr__(self, "domain", (float(lo), float(hi)))
        for name in ("m0", "delta", "epsilon"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ConfigError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        if not self.delta > 0:
            raise ConfigError("0 < delta violated")
        if not self.delta < self.epsilon:
            raise ConfigError("delta < epsilon violated")
        if not lo < hi:
            raise ConfigError("domain must satisfy m_min < m_max")
        slack = 1e-9 * (hi - lo)  # grid arithmetic such as 2.0 + 0.3 - 0.3
        if not (lo - slack <= self.m0 - self.epsilon and self.m0 + self.epsilon <= hi + slack):
            raise ConfigError("window exceeds domain")

    @property
    def sr(self) -> tuple:
        return (self.m0 - self.delta, self.m0 + self.delta)

    @property
    def ss_outer(self) -> tuple:
        return (self.m0 - self.epsilon, self.m0 + self.epsilon)

    def contains_sr(self, m: float) -> bool:
        return abs(m - self.m0) < self.delta

    def to_dict(self) -> dict:
        return {
            "m0": self.m0,
            "delta": self.delta,
            "epsilon": self.epsilon,
            "domain": list(self.domain),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WindowSpec":
        return cls(d["m0"], d["delta"], d["epsilon"], tuple(d["domain"]))


def assign_region(m: float, w: WindowSpec) -> Region:
    """Region of a single event; boundaries go to the outer region."""
    lo, hi = w.domain
    if not lo <= m <= hi:
        raise OutOfDomainError(f"m={m} outside domain [{lo}, {hi}]")
    dist = abs(m - w.m0)
    if dist < w.delta:
        return Region.SR
    if dist < w.epsilon:
        return Region.SS
    return Region.FarSB


def assign_regions(m, w: WindowSpec) -> np.ndarray:
    """Vectorized :func:`assign_region`, returning ``int8`` region codes."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = w.domain
    bad = (m < lo) | (m > hi)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise OutOfDomainError(f"m={m[i]} (row {i}) outside domain [{lo}, {hi}]")
    dist = np.abs(m - w.m0)
    out = np.full(m.shape, Region.FarSB, dtype=np.int8)
    out[dist < w.epsilon] = Region.SS
    out[dist < w.delta] = Region.SR
    return out


def partition(ds: Dataset, w: WindowSpec):
    """Split ``ds`` into (SR, SS, FarSB) datasets, preserving row order."""
    reg = assign_regions(ds.m, w)
    parts = tuple(ds.subset(reg == r) for r in Region)
    if len(parts[Region.SR]) == 0:
        raise DegenerateWindowError(f"empty signal region at m0={w.m0}")
    if len(parts[Region.SS]) == 0:
        raise DegenerateWindowError(f"empty short sideband at m0={w.m0}")
    return parts


@dataclass
class ScoreTable:
    """Per-event anomaly scores for one window.

    ``score`` is a probability for classifier scorers and a log density
    ratio for density scorers.  Row order matches the scored dataset.
    ``hunt`` flags events the scorer was not trained on; when present,
    only those may be selected and counted by a bump hunt.
    """

    score: np.ndarray
    region: np.ndarray
    m: np.ndarray
    labels: Optional[np.ndarray] = None
    window: Optional[WindowSpec] = None
    meta: dict = field(default_factory=dict)
    hunt: Optional[np.ndarray] = None

    def __post_init__(self):
        self.score = np.asarray(self.score, dtype=np.float64)
        self.region = np.asarray(self.region, dtype=np.int8)
        self.m = np.asarray(self.m, dtype=np.float64)
        n = len(self.score)
        if self.region.shape != (n,) or self.m.shape != (n,):
            raise DataError("score, region and m must have equal length")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int8)
            if self.labels.shape != (n,):
                raise DataError("labels must have one entry per score")
        if self.hunt is not None:
            self.hunt = np.asarray(self.hunt, dtype=bool)
            if self.hunt.shape != (n,):
                raise DataError("hunt mask must have one entry per score")

    def __len__(self) -> int:
        return len(self.score)

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def subset(self, index) -> "ScoreTable":
        return ScoreTable(
            self.score[index],
            self.region[index],
            self.m[index],
            None if self.labels is None else self.labels[index],
            self.window,
            dict(self.meta),
            None if self.hunt is None else self.hunt[index],
        )

    def in_region(self, *regions: Region) -> "ScoreTable":
        return self.subset(np.isin(self.region, [int(r) for r in regions]))

    def sideband_mask(self) -> np.ndarray:
        return self.region != Region.SR

    def hunt_mask(self) -> np.ndarray:
        """Events eligible for selection (all of them without a hunt mask)."""
        return np.ones(len(self), dtype=bool) if self.hunt is None else self.hunt
