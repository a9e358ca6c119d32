"""Scalar interval calibration selected on VAL, one factor per horizon.

Intervals are inflated (or sharpened) symmetrically around the median:
lower' = m - s * (m - lower), upper' = m + s * (upper - m). Coverage is a
nondecreasing step function of s, so the factor is picked by scanning a
geometric grid for the smallest value that reaches the target coverage.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

GRID = 0.5 * 1.05 ** np.arange(61)  # 0.5 .. ~9.34, 5% relative steps


def apply_factor(median: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                 s: float) -> tuple[np.ndarray, np.ndarray]:
    """Rescale both half-widths around the median by s (s=1 is the identity)."""
    return median - s * (median - lower), median + s * (upper - median)


def coverage_at(median, lower, upper, target_values, s: float) -> float:
    lo, hi = apply_factor(median, lower, upper, s)
    return float(np.mean((target_values >= lo) & (target_values <= hi)))


def calibrate_factor(median, lower, upper, target_values,
                     target_coverage: float) -> float:
    """Smallest grid factor whose coverage reaches the target.

    Falls back to the grid maximum (with a warning) when even that cannot
    reach the target.
    """
    median = np.asarray(median, dtype=np.float64).ravel()
    lower = np.asarray(lower, dtype=np.float64).ravel()
    upper = np.asarray(upper, dtype=np.float64).ravel()
    target_values = np.asarray(target_values, dtype=np.float64).ravel()
    lo_half = median - lower
    hi_half = upper - median
    lo_all = median[None, :] - GRID[:, None] * lo_half[None, :]
    hi_all = median[None, :] + GRID[:, None] * hi_half[None, :]
    cov = ((target_values >= lo_all) & (target_values <= hi_all)).mean(axis=1)
    reached = np.flatnonzero(cov >= target_coverage)
    if len(reached) == 0:
        warnings.warn(
            f"target coverage {target_coverage:.3f} unreachable on the grid "
            f"(best {cov[-1]:.3f} at s={GRID[-1]:.3f})", RuntimeWarning)
        return float(GRID[-1])
    return float(GRID[reached[0]])


@dataclass
class CalibrationTable:
    """Per-horizon inflation factors plus the coverage level they target."""

    target: float
    factors: dict[int, float] = field(default_factory=dict)

    def factor(self, h: int) -> float:
        return self.factors[h]

    def apply(self, h: int, median, lower, upper):
        return apply_factor(median, lower, upper, self.factors[h])

    def as_dict(self) -> dict:
        return {"target": self.target,
                "factors": {str(h): s for h, s in sorted(self.factors.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationTable":
        return cls(target=float(d["target"]),
                   factors={int(h): float(s) for h, s in d["factors"].items()})


def calibrate(streams: dict, target_coverage: float = 0.8) -> CalibrationTable:
    """Fit one factor per horizon from (median, lower, upper, target) streams."""
    if not streams:
        raise ValueError("no calibration streams (no VAL windows at any horizon)")
    table = CalibrationTable(target=target_coverage)
    for h, (med, lo, hi, tv) in sorted(streams.items()):
        table.factors[h] = calibrate_factor(med, lo, hi, tv, target_coverage)
    return table
