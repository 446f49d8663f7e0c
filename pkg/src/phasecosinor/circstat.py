"""Circular means, resultant length and circular variance."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import wrap_angle
from .exceptions import ResultantDegenerate

RESULTANT_EPS = 1e-12


@dataclass(frozen=True)
class AngleSample:
    angles: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        angles = np.asarray(self.angles, dtype=float).ravel()
        if angles.size == 0:
            raise ValueError("need at least one angle")
        if not np.all(np.isfinite(angles)):
            raise ValueError("angles must be finite")
        object.__setattr__(self, "angles", angles)
        if self.weights is not None:
            weights = np.asarray(self.weights, dtype=float).ravel()
            if weights.shape != angles.shape:
                raise ValueError("weights and angles differ in length")
            if np.any(weights < 0) or not np.any(weights > 0):
                raise ValueError("weights must be nonnegative with at least one positive")
            object.__setattr__(self, "weights", weights)


def _as_sample(s) -> AngleSample:
    return s if isinstance(s, AngleSample) else AngleSample(s)


def mean_components(s: AngleSample | Sequence[float]) -> tuple[float, float]:
    """Weighted mean of (sin, cos) over the sample."""
    s = _as_sample(s)
    if s.weights is None:
        w = np.full(s.angles.shape, 1.0 / s.angles.size)
    else:
        w = s.weights / math.fsum(s.weights)
    return float(np.dot(w, np.sin(s.angles))), float(np.dot(w, np.cos(s.angles)))


def circular_mean(s: AngleSample | Sequence[float]) -> float:
    """Mean direction in (-pi, pi].

    Raises ResultantDegenerate when both mean components are below 1e-12.
    """
    sbar, cbar = mean_components(s)
    if abs(sbar) < RESULTANT_EPS and abs(cbar) < RESULTANT_EPS:
        raise ResultantDegenerate("mean direction undefined for a zero resultant")
    return wrap_angle(math.atan2(sbar, cbar))


def resultant_length(angles: Sequence[float]) -> float:
    sbar, cbar = mean_components(AngleSample(angles))
    return min(math.hypot(sbar, cbar), 1.0)


def circular_variance(angles: Sequence[float]) -> float:
    return 1.0 - resultant_length(angles)
