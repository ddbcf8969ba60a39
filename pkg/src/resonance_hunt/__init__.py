"""Weakly supervised resonant anomaly detection with a sideband bump hunt.

Stages: toy generation (:mod:`datagen`), CSV ingestion (:mod:`ingest`),
window scans (:mod:`windows`), anomaly scoring by classification without
labels (:mod:`cwola`) or conditional density ratios (:mod:`density`), the
bump hunt itself (:mod:`bumphunt`) and truth-label evaluation
(:mod:`evaluation`).
"""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    ConfigError,
    DataError,
    Dataset,
    NumericalError,
    Region,
    ResonanceHuntError,
    ScoreTable,
    WindowSpec,
    assign_region,
    partition,
)
