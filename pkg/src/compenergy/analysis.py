"""Validation metrics and the fixed-overhead + FLOP-proportional energy model."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from compenergy.engine import EnergyEstimate
from compenergy.errors import FitError, MetricError
from compenergy.flops import FlopCount


class NegativeInterceptWarning(UserWarning):
    """A two-term fit produced a negative fixed overhead."""


def capture(component_estimates: Iterable[EnergyEstimate],
            model_estimate: EnergyEstimate) -> tuple[float, float]:
    """Sum of component means (mJ) and its percentage of the whole-model mean."""
    if not model_estimate.mean > 0:
        raise MetricError(f"model energy must be positive, got {model_estimate.mean}")
    captured = float(sum(e.mean for e in component_estimates))
    return captured, 100.0 * captured / model_estimate.mean


def _total_flops(flops: FlopCount | int | float) -> float:
    return float(flops.total_flops if isinstance(flops, FlopCount) else flops)


def e_per_flop(energy: float, flops: FlopCount | int) -> float:
    """Average energy per GFLOP, mJ/GFLOP."""
    total = _total_flops(flops)
    if total <= 0:
        raise MetricError("energy per FLOP is undefined for zero FLOPs")
    return energy / (total * 1e-9)


@dataclass(frozen=True)
class LengthSeries:
    """Energy and FLOPs of one component across input lengths."""

    lengths: tuple[int, ...]
    energies: tuple[float, ...]
    flops: tuple[int, ...]
    component: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "lengths", tuple(int(x) for x in self.lengths))
        object.__setattr__(self, "energies", tuple(float(x) for x in self.energies))
        object.__setattr__(self, "flops", tuple(int(_total_flops(f)) for f in self.flops))
        if not len(self.lengths) == len(self.energies) == len(self.flops):
            raise ValueError("lengths, energies and flops must have equal size")
        if any(b <= a for a, b in zip(self.lengths, self.lengths[1:])):
            raise ValueError("lengths must be strictly increasing")
        if any(x < 1 for x in self.lengths):
            raise ValueError("lengths must be positive")

    @property
    def gflops(self) -> np.ndarray:
        return np.asarray(self.flops, dtype=np.float64) * 1e-9


def marginal_e_per_flop(series: LengthSeries) -> list[float]:
    """``dE / dGFLOP`` for each adjacent pair of lengths."""
    if len(series.lengths) < 2:
        raise MetricError("marginal energy per FLOP needs at least two lengths")
    out = []
    for i in range(len(series.lengths) - 1):
        df = series.flops[i + 1] - series.flops[i]
        if df == 0:
            raise MetricError(
                f"{series.component}: equal FLOPs at lengths {series.lengths[i]} and "
                f"{series.lengths[i + 1]}")
        out.append((series.energies[i + 1] - series.energies[i]) / (df * 1e-9))
    return out


@dataclass(frozen=True)
class TwoTermFit:
    e0_hat: float  # mJ
    k_hat: float  # mJ per GFLOP
    r_squared: float
    residuals: tuple[float, ...]
    negative_intercept: bool = False

    def predict(self, gflops) -> np.ndarray:
        return self.e0_hat + self.k_hat * np.asarray(gflops, dtype=np.float64)


def fit_two_term(series: LengthSeries, weights: Sequence[float] | None = None) -> TwoTermFit:
    """Least-squares fit of ``E = e0 + k * GFLOPs`` with an intercept.

    ``weights`` (e.g. inverse trial variances) switch to weighted least squares.
    R^2 is measured against the (weighted) mean-only baseline.  A negative
    intercept is kept and flagged, with a :class:`NegativeInterceptWarning`.
    """
    x = series.gflops
    y = np.asarray(series.energies, dtype=np.float64)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != x.shape or np.any(w <= 0):
        raise FitError("weights must be positive, one per length")
    if len(set(series.flops)) < 2:
        raise FitError(f"{series.component}: need at least two distinct FLOP values")

    xm = np.sum(w * x) / np.sum(w)
    ym = np.sum(w * y) / np.sum(w)
    dx, dy = x - xm, y - ym
    sxx = np.sum(w * dx * dx)
    if sxx <= 0:
        raise FitError(f"{series.component}: rank-deficient design")
    k = float(np.sum(w * dx * dy) / sxx)
    e0 = float(ym - k * xm)
    resid = y - (e0 + k * x)
    ss_tot = float(np.sum(w * dy * dy))
    ss_res = float(np.sum(w * resid * resid))
    r2 = 1.0 if ss_tot == 0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    negative = e0 < 0
    if negative:
        warnings.warn(f"{series.component}: fitted fixed overhead is negative ({e0:.4g} mJ)",
                      NegativeInterceptWarning, stacklevel=2)
    return TwoTermFit(e0, k, r2, tuple(float(r) for r in resid), negative)


def stddev_profile(estimates: Iterable[EnergyEstimate]) -> list[tuple[float, float]]:
    """(mean mJ, relative std %) pairs sorted by mean."""
    pairs = []
    for e in estimates:
        if not e.mean > 0:
            raise MetricError(f"{e.label}: relative std needs a positive mean")
        pairs.append((e.mean, 100.0 * e.std / e.mean))
    return sorted(pairs)
