"""Domain types and cosinor parameter identities.

All times are in hours and the angular frequency is fixed at pi/12 rad/h
(24 h period).  Phases are stored in the half-open range (-pi, pi].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable

import numpy as np

from .exceptions import DegenerateAmplitude

OMEGA = math.pi / 12.0
TWO_PI = 2.0 * math.pi


def wrap_angle(theta):
    """Map angles to (-pi, pi].  Works on scalars and arrays."""
    wrapped = np.pi - np.mod(np.pi - np.asarray(theta, dtype=float), TWO_PI)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def wrap_positive(theta):
    """Map angles to [0, 2*pi)."""
    wrapped = np.mod(np.asarray(theta, dtype=float), TWO_PI)
    # np.mod can return exactly 2*pi for tiny negative inputs
    wrapped = np.where(wrapped >= TWO_PI, 0.0, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class LongitudinalSeries:
    """Sample times (hours) and expression values for one individual."""

    individual_id: Hashable
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        values = np.asarray(self.values, dtype=float).ravel()
        if times.size == 0:
            raise ValueError("a series needs at least one sample")
        if times.shape != values.shape:
            raise ValueError(
                f"times and values differ in length ({times.size} != {values.size})"
            )
        if not np.all(np.isfinite(times)):
            raise ValueError("sample times must be finite")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.times.size

    def shifted(self, hours: float) -> "LongitudinalSeries":
        return LongitudinalSeries(self.individual_id, self.times + hours, self.values)


@dataclass(frozen=True)
class CosinorParams:
    """Linear form (mu0, beta1, beta2) of a single-harmonic cosinor."""

    mu0: float
    beta1: float
    beta2: float

    def __post_init__(self):
        for name in ("mu0", "beta1", "beta2"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)

    @classmethod
    def from_array(cls, beta) -> "CosinorParams":
        beta = np.asarray(beta, dtype=float)
        return cls(beta[0], beta[1], beta[2])

    def as_array(self) -> np.ndarray:
        return np.array([self.mu0, self.beta1, self.beta2])

    @property
    def amplitude(self) -> float:
        return linear_to_amplitude_phase(self)[0]

    @property
    def phase(self) -> float:
        return linear_to_amplitude_phase(self)[1]

    @property
    def phase_degenerate(self) -> bool:
        return self.beta1 == 0.0 and self.beta2 == 0.0

    def evaluate(self, times) -> np.ndarray:
        x = OMEGA * np.asarray(times, dtype=float)
        return self.mu0 + self.beta1 * np.sin(x) + self.beta2 * np.cos(x)


@dataclass(frozen=True)
class FitCovariance:
    """Estimated covariance of (mu0, beta1, beta2)."""

    sigma: np.ndarray = field(repr=False)

    def __post_init__(self):
        sigma = np.array(self.sigma, dtype=float)
        if sigma.shape != (3, 3):
            raise ValueError(f"covariance must be 3x3, got {sigma.shape}")
        scale = max(np.max(np.abs(sigma)), 1e-300)
        if np.max(np.abs(sigma - sigma.T)) > 1e-12 * scale:
            raise ValueError("covariance must be symmetric")
        sigma = 0.5 * (sigma + sigma.T)
        if np.any(np.diag(sigma) < 0):
            raise ValueError("covariance diagonal must be nonnegative")
        sigma.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)


@dataclass(frozen=True)
class RandomEffectSpec:
    """Random-effect covariance psi of (m0, b1, b2) and residual variance."""

    psi: np.ndarray = field(repr=False)
    sigma2: float

    def __post_init__(self):
        psi = np.array(self.psi, dtype=float)
        if psi.shape == (3,):
            psi = np.diag(psi)
        if psi.shape != (3, 3):
            raise ValueError(f"psi must be 3x3 or a length-3 diagonal, got {psi.shape}")
        if not np.allclose(psi, psi.T, rtol=1e-12, atol=0.0):
            raise ValueError("psi must be symmetric")
        eig = np.linalg.eigvalsh(psi)
        if eig.min() < -1e-10 * max(np.trace(psi), 1e-300):
            raise ValueError("psi must be positive semidefinite")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        psi.setflags(write=False)
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def is_diagonal(self) -> bool:
        return bool(np.all(self.psi == np.diag(np.diag(self.psi))))


def linear_to_amplitude_phase(p: CosinorParams) -> tuple[float, float]:
    """Return (amplitude, phase) for the linear coefficients of ``p``.

    ``atan2(0, 0)`` is taken as 0; callers that care should check
    ``p.phase_degenerate``.
    """
    theta1 = math.hypot(p.beta1, p.beta2)
    if theta1 == 0.0:
        return 0.0, 0.0
    return theta1, wrap_angle(math.atan2(-p.beta1, p.beta2))


def amplitude_phase_to_linear(theta1: float, theta2: float) -> tuple[float, float]:
    if theta1 < 0:
        raise ValueError("amplitude must be nonnegative")
    return -theta1 * math.sin(theta2), theta1 * math.cos(theta2)


def tangential_variance(p: CosinorParams, cov: FitCovariance) -> float:
    """Variance of (beta1, beta2) across the coefficient vector's direction.

    Equals ``phase_variance * amplitude**2``.  This is the quantity the
    time-translation weights are built from by default.
    """
    b1, b2 = p.beta1, p.beta2
    r2 = b1 * b1 + b2 * b2
    if r2 == 0.0:
        raise DegenerateAmplitude("phase variance is undefined at zero amplitude")
    s = cov.sigma
    var = (s[1, 1] * b2 * b2 + s[2, 2] * b1 * b1 - 2.0 * s[1, 2] * b1 * b2) / r2
    return max(var, 0.0)


def phase_variance(p: CosinorParams, cov: FitCovariance) -> float:
    """Delta-method variance of the phase atan2(-beta1, beta2).

    The gradient of the phase in (beta1, beta2) is (-beta2, beta1) / r^2
    with r the amplitude.
    """
    return tangential_variance(p, cov) / (p.beta1 * p.beta1 + p.beta2 * p.beta2)
