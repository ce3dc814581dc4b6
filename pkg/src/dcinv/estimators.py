"""Stochastic misfit estimation via random weight matrices.

Three sampling schemes are supported. Gaussian and Hutchinson columns have
i.i.d. entries with identity second moment, and the estimate averages
||R w_j||^2 over the k columns. Random-subset columns pick k distinct
experiments and carry a sqrt(s/k) scaling, so that ||R W||_F^2 is itself
the unbiased estimate (expectation of W W^T is the identity for the matrix
as a whole, not per column); with k = s it reproduces the full misfit
exactly. All three are unbiased for the full misfit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DISTRIBUTIONS = ("gaussian", "hutchinson", "random_subset")


@dataclass(frozen=True)
class WeightMatrix:
    """An s x k sampling matrix tagged with its distribution."""

    entries: np.ndarray
    distribution: str
    seed_label: str | None = None

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if self.entries.ndim != 2:
            raise ValueError("weight entries must be an (s, k) matrix")

    @property
    def s(self) -> int:
        return self.entries.shape[0]

    @property
    def k(self) -> int:
        return self.entries.shape[1]

    def subset(self) -> tuple[np.ndarray, np.ndarray]:
        """(row index, scale) per column for one-nonzero-per-column matrices."""
        nz_counts = np.count_nonzero(self.entries, axis=0)
        if not np.all(nz_counts == 1):
            raise ValueError("random-subset weight matrix must have one nonzero per column")
        idx = np.argmax(self.entries != 0.0, axis=0)
        return idx, self.entries[idx, np.arange(self.k)]


def draw_weights(s: int, k: int, distribution: str, rng: np.random.Generator) -> WeightMatrix:
    """Draw an s x k weight matrix from the named distribution."""
    if not 1 <= k <= s:
        raise ValueError(f"need 1 <= k <= s, got k={k}, s={s}")
    if distribution == "gaussian":
        entries = rng.standard_normal((s, k))
    elif distribution == "hutchinson":
        entries = rng.integers(0, 2, size=(s, k)) * 2.0 - 1.0
    elif distribution == "random_subset":
        idx = rng.choice(s, size=k, replace=False)
        entries = np.zeros((s, k))
        entries[idx, np.arange(k)] = np.sqrt(s / k)
    else:
        raise ValueError(f"unknown distribution {distribution!r}")
    return WeightMatrix(entries=entries, distribution=distribution)


def misfit_full(F, D) -> float:
    """Full data misfit: sum over experiments of the squared residual norm.

    Accepts (l, s) matrices for shared receivers or per-experiment vector
    sequences for heterogeneous ones.
    """
    if isinstance(F, np.ndarray) and isinstance(D, np.ndarray):
        if F.shape != D.shape:
            raise ValueError(f"shape mismatch {F.shape} vs {D.shape}")
        return float(np.sum((F - D) ** 2))
    if len(F) != len(D):
        raise ValueError(f"experiment count mismatch {len(F)} vs {len(D)}")
    total = 0.0
    for f, d in zip(F, D):
        if f.shape != d.shape:
            raise ValueError(f"shape mismatch {f.shape} vs {d.shape}")
        total += float(np.sum((f - d) ** 2))
    return total


class MatrixResiduals:
    """Residual provider over a precomputed residual matrix (no solves)."""

    def __init__(self, R: np.ndarray):
        self.R = np.asarray(R, dtype=float)

    @property
    def n_experiments(self) -> int:
        return self.R.shape[1]

    def residual(self, i: int) -> np.ndarray:
        return self.R[:, i]

    def residual_block(self, indices) -> list[np.ndarray]:
        return [self.R[:, i] for i in np.asarray(indices)]

    def combo_residual(self, w: np.ndarray) -> np.ndarray:
        return self.R @ w

    def combo_block(self, W: np.ndarray) -> np.ndarray:
        return self.R @ W

    def full_misfit(self) -> float:
        return float(np.sum(self.R**2))


def misfit_estimate(provider, weights: WeightMatrix) -> float:
    """Unbiased misfit estimate from sampled residual combinations.

    Solve cost is one per column: an aggregated simultaneous-sources solve
    for dense weights, or one selected experiment for subset weights.
    """
    W = weights.entries
    if weights.distribution == "random_subset":
        idx, scale = weights.subset()
        if hasattr(provider, "residual_block"):
            residuals = provider.residual_block(idx)
        else:
            residuals = [provider.residual(i) for i in idx]
        return float(sum(c * c * np.dot(r, r) for c, r in zip(scale, residuals)))
    if hasattr(provider, "combo_block"):
        R = provider.combo_block(W)
        return float(np.sum(R**2)) / weights.k
    total = 0.0
    for j in range(weights.k):
        r = provider.combo_residual(W[:, j])
        total += float(np.dot(r, r))
    return total / weights.k
