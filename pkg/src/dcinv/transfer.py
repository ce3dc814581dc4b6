"""Transfer functions mapping the inversion variable m to conductivity.

The map is a scaled tanh, so the conductivity stays strictly inside
(alpha1, alpha2) for any finite m. Two flavours are used: a "bounds"
parametrization (shape parameter 1) enforcing known conductivity bounds,
and an approximate level-set parametrization whose shape parameter is tied
to the grid width h so the transition sharpens under refinement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Grid


@dataclass(frozen=True)
class TransferFunction:
    kind: str  # "bounds" | "level_set"
    theta: float
    alpha1: float
    alpha2: float

    def __post_init__(self):
        if self.kind not in ("bounds", "level_set"):
            raise ValueError(f"unknown transfer kind {self.kind!r}")
        if not (0.0 < self.alpha1 < self.alpha2):
            raise ValueError(
                f"need 0 < alpha1 < alpha2, got ({self.alpha1}, {self.alpha2})"
            )
        if self.theta <= 0.0:
            raise ValueError(f"theta must be positive, got {self.theta}")

    @property
    def alpha(self) -> float:
        return 0.5 * (self.alpha2 - self.alpha1)

    def sigma(self, tau):
        return psi(tau, self)

    def sigma_prime(self, tau):
        return psi_prime(tau, self)


def psi(tau, tf: TransferFunction):
    """alpha * tanh(tau / (alpha * theta)) + (alpha1 + alpha2) / 2."""
    tau = np.asarray(tau, dtype=float)
    a = tf.alpha
    return a * np.tanh(tau / (a * tf.theta)) + 0.5 * (tf.alpha1 + tf.alpha2)


def psi_prime(tau, tf: TransferFunction):
    """Derivative of psi: sech^2(tau / (alpha*theta)) / theta, always > 0."""
    tau = np.asarray(tau, dtype=float)
    x = np.abs(tau / (tf.alpha * tf.theta))
    # sech^2 via exp(-2|x|): 4 e^{-2x} / (1 + e^{-2x})^2, overflow-free.
    e = np.exp(-2.0 * x)
    return (4.0 * e / (1.0 + e) ** 2) / tf.theta


def bounds_transfer(sigma_min: float, sigma_max: float) -> TransferFunction:
    """Bound-enforcing parametrization: sigma(m) in (sigma_min, sigma_max)."""
    return TransferFunction(kind="bounds", theta=1.0, alpha1=sigma_min, alpha2=sigma_max)


def level_set_transfer(sigma_lo: float, sigma_hi: float, h: float) -> TransferFunction:
    """Approximate level-set parametrization for two-valued conductivities.

    The shape parameter equals the grid width h, so the representation
    sharpens toward a true level set as the grid is refined.
    """
    return TransferFunction(kind="level_set", theta=h, alpha1=sigma_lo, alpha2=sigma_hi)


def initial_guess(grid: Grid, tf: TransferFunction, amplitude_scale: float = 20.0) -> np.ndarray:
    """Per-cell initial model m0.

    Bounds kind: zeros (the midpoint conductivity). Level-set kind: a
    rounded blob of radius 0.15 centered in the domain, scaled so psi
    saturates well inside/outside the blob. The blob amplitude is a config
    default, not a calibrated value.
    """
    if tf.kind == "bounds":
        return np.zeros(grid.n_cells)
    centers = grid.cell_centers() - 0.5
    # l4 ball gives a cube with rounded corners
    r4 = np.power(np.sum(centers**4, axis=1), 0.25)
    amp = amplitude_scale * tf.alpha * tf.theta / 0.15
    return amp * (0.15 - r4)
