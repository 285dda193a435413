"""Gaussian-RBF influence functions with shared means and precision.

An influence function is a weighted sum of Gaussian bumps,

    phi(z) = sum_j w_j * exp(-gamma/2 * (z - mu_j)^2),

with the means mu_j equally spaced and the precision gamma shared across all
mixtures of a model. Only the weights are learned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class RbfGeometry:
    """Equally spaced means on [center-r, center+r] plus a shared precision."""

    means: np.ndarray
    gamma: float

    def __post_init__(self):
        mu = np.asarray(self.means, dtype=np.float64)
        object.__setattr__(self, "means", mu)
        if mu.ndim != 1 or mu.size < 2:
            raise ValueError("need at least 2 means")
        d = np.diff(mu)
        if np.any(d <= 0):
            raise ValueError("means must be strictly increasing")
        if np.max(np.abs(d - d[0])) > 1e-12:
            raise ValueError("means must be equally spaced")
        if not self.gamma > 0:
            raise ValueError("precision must be positive")

    @property
    def count(self) -> int:
        return self.means.size

    @property
    def spacing(self) -> float:
        return float(self.means[1] - self.means[0])


def make_geometry(count: int, radius: float = 1.0, gamma: float | None = None) -> RbfGeometry:
    """Standard geometry: `count` means on [-radius, radius].

    When gamma is not given it defaults to 1/spacing^2, i.e. each bump's
    standard deviation equals the mean spacing, which gives smooth overlap.
    """
    means = np.linspace(-radius, radius, count)
    if gamma is None:
        delta = means[1] - means[0]
        gamma = 1.0 / (delta * delta)
    return RbfGeometry(means=means, gamma=float(gamma))


@dataclass(frozen=True)
class RbfMixture:
    geometry: RbfGeometry
    weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if w.shape != (self.geometry.count,):
            raise ValueError(f"expected {self.geometry.count} weights, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")


def rbf_kernel(geometry: RbfGeometry, z: np.ndarray) -> np.ndarray:
    """Gaussian responses exp(-gamma/2 (z - mu_j)^2), shape z.shape + (M,)."""
    z = np.asarray(z, dtype=np.float64)
    d = z[..., None] - geometry.means
    d *= d
    d *= -0.5 * geometry.gamma
    return np.exp(d, out=d)


def rbf_basis_matrix(geometry: RbfGeometry, b: np.ndarray) -> np.ndarray:
    """N x M matrix G with G[n, j] = exp(-gamma/2 (b_n - mu_j)^2)."""
    b = np.asarray(b, dtype=np.float64).ravel()
    return rbf_kernel(geometry, b)


def rbf_eval(mix: RbfMixture, z: np.ndarray) -> np.ndarray:
    """Elementwise phi(z) = sum_j w_j exp(-gamma/2 (z - mu_j)^2)."""
    return rbf_kernel(mix.geometry, z) @ mix.weights


def rbf_deriv(mix: RbfMixture, z: np.ndarray) -> np.ndarray:
    """Elementwise analytic derivative phi'(z)."""
    z = np.asarray(z, dtype=np.float64)
    g = mix.geometry
    d = z[..., None] - g.means
    return (np.exp((-0.5 * g.gamma) * d * d) * (-g.gamma * d)) @ mix.weights


def fit_weights(geometry: RbfGeometry, target) -> np.ndarray:
    """Least-squares weights reproducing `target` sampled at the means.

    `target` is a callable z -> value or an array of samples at the means.
    """
    if callable(target):
        samples = np.asarray([target(m) for m in geometry.means], dtype=np.float64)
    else:
        samples = np.asarray(target, dtype=np.float64)
    g = rbf_basis_matrix(geometry, geometry.means)
    w, *_ = np.linalg.lstsq(g, samples, rcond=None)
    return w
