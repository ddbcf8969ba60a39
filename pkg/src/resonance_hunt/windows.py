"""Single windows and sliding-window scans over the resonant feature."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .core import ConfigError, WindowSpec

# slack for floating-point comparisons on the m grid
_TOL = 1e-9


@dataclass(frozen=True)
class ScanPlan:
    windows: tuple
    step: float
    n_independent: int

    def __post_init__(self):
        object.__setattr__(self, "windows", tuple(self.windows))
        if not self.windows:
            raise ConfigError("scan plan has no windows")
        m0s = [w.m0 for w in self.windows]
        if m0s != sorted(m0s):
            raise ConfigError("scan windows must be sorted by m0")
        if self.n_independent < 1:
            raise ConfigError("n_independent must be at least 1")

    def __len__(self) -> int:
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)

    def to_dict(self) -> dict:
        return {
            "windows": [w.to_dict() for w in self.windows],
            "step": self.step,
            "n_independent": self.n_independent,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScanPlan":
        return cls(tuple(WindowSpec.from_dict(w) for w in d["windows"]), d["step"], d["n_independent"])

    @classmethod
    def single(cls, w: WindowSpec) -> "ScanPlan":
        return cls((w,), 0.0, 1)

    @classmethod
    def from_windows(cls, windows: Sequence[WindowSpec]) -> "ScanPlan":
        """Rebuild a plan from its windows (all sharing one geometry)."""
        windows = sorted(windows, key=lambda w: w.m0)
        if len(windows) == 1:
            return cls.single(windows[0])
        w0 = windows[0]
        step = windows[1].m0 - w0.m0
        return cls(tuple(windows), step, independent_count(w0.domain, w0.delta, w0.epsilon))


def make_window(m0: float, delta: float, epsilon: float, domain) -> WindowSpec:
    """Validated window; :class:`ConfigError` names the violated clause."""
    return WindowSpec(m0, delta, epsilon, tuple(domain))


def independent_count(domain, delta: float, epsilon: float) -> int:
    """Number of non-overlapping signal regions across the range of centres."""
    lo, hi = domain
    scanned = (hi - lo) - 2 * epsilon
    return max(1, int(math.floor(scanned / (2 * delta) + _TOL)))


def plan_scan(domain, delta: float, epsilon: float, step: float) -> ScanPlan:
    """Windows at ``m0 = m_min + epsilon + k * step`` while ``m0 + epsilon <= m_max``."""
    if not step > 0:
        raise ConfigError("scan step must be positive")
    lo, hi = map(float, domain)
    if not 0 < delta < epsilon:
        raise ConfigError("delta < epsilon violated")
    windows = []
    k = 0
    while True:
        m0 = lo + epsilon + k * step
        if m0 + epsilon > hi + _TOL:
            break
        windows.append(make_window(min(m0, hi - epsilon), delta, epsilon, (lo, hi)))
        k += 1
    if not windows:
        raise ConfigError("no window fits in the domain")
    return ScanPlan(tuple(windows), float(step), independent_count((lo, hi), delta, epsilon))


def default_geometry(domain, width_proxy: Optional[float] = None) -> tuple:
    """``(delta, epsilon, step)``: delta is the width proxy (default 2% of span)."""
    lo, hi = domain
    delta = 0.02 * (hi - lo) if width_proxy is None else float(width_proxy)
    return delta, 3 * delta, delta
