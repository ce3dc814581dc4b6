import numpy as np
import pytest

from dcinv.estimators import (
    MatrixResiduals,
    WeightMatrix,
    draw_weights,
    misfit_estimate,
    misfit_full,
)
from dcinv.rng import RngHub


def test_hutchinson_support():
    rng = np.random.default_rng(0)
    w = draw_weights(4, 2, "hutchinson", rng)
    assert set(np.unique(w.entries)) <= {-1.0, 1.0}


def test_random_subset_construction():
    rng = np.random.default_rng(1)
    w = draw_weights(9, 3, "random_subset", rng)
    assert w.entries.shape == (9, 3)
    idx, scale = w.subset()
    assert np.unique(idx).size == 3  # distinct rows
    assert np.allclose(scale, np.sqrt(3.0))
    assert np.count_nonzero(w.entries) == 3


def test_gaussian_second_moment_monte_carlo():
    rng = np.random.default_rng(2)
    s, n = 4, 10**5
    cols = np.hstack([
        draw_weights(s, s, "gaussian", rng).entries for _ in range(n // s)
    ])
    gram = (cols @ cols.T) / cols.shape[1]
    assert np.abs(gram - np.eye(s)).max() < 3.0 / np.sqrt(n) * np.sqrt(2)


def test_k_larger_than_s_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        draw_weights(4, 5, "gaussian", rng)
    with pytest.raises(ValueError):
        draw_weights(4, 0, "hutchinson", rng)


def test_misfit_full_basics():
    F = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert misfit_full(F, F) == 0.0
    assert misfit_full(np.array([[3.0], [4.0]]), np.zeros((2, 1))) == 25.0
    with pytest.raises(ValueError):
        misfit_full(np.zeros((2, 2)), np.zeros((3, 2)))


def test_misfit_full_ragged():
    F = [np.array([1.0, 2.0]), np.array([0.5])]
    D = [np.array([0.0, 0.0]), np.array([0.0])]
    assert misfit_full(F, D) == pytest.approx(5.25)


def test_identity_weights_reproduce_full_misfit():
    rng = np.random.default_rng(3)
    R = rng.standard_normal((6, 5))
    provider = MatrixResiduals(R)
    phi = misfit_full(R, np.zeros_like(R))
    w_ident = WeightMatrix(np.eye(5), "random_subset")
    assert misfit_estimate(provider, w_ident) == pytest.approx(phi, rel=1e-12)


def test_random_subset_full_draw_is_exact():
    rng = np.random.default_rng(4)
    R = rng.standard_normal((7, 6))
    provider = MatrixResiduals(R)
    phi = float(np.sum(R**2))
    w = draw_weights(6, 6, "random_subset", np.random.default_rng(9))
    assert misfit_estimate(provider, w) == pytest.approx(phi, rel=1e-12)


def test_hutchinson_unbiased_monte_carlo():
    rng = np.random.default_rng(5)
    R = rng.standard_normal((5, 8))
    provider = MatrixResiduals(R)
    phi = float(np.sum(R**2))
    draws = np.array([
        misfit_estimate(provider, draw_weights(8, 2, "hutchinson", rng))
        for _ in range(2000)
    ])
    se = draws.std(ddof=1) / np.sqrt(draws.size)
    assert abs(draws.mean() - phi) <= 3 * se


def test_subset_unbiased_monte_carlo():
    rng = np.random.default_rng(6)
    R = rng.standard_normal((5, 9))
    provider = MatrixResiduals(R)
    phi = float(np.sum(R**2))
    draws = np.array([
        misfit_estimate(provider, draw_weights(9, 3, "random_subset", rng))
        for _ in range(2000)
    ])
    se = draws.std(ddof=1) / np.sqrt(draws.size)
    assert abs(draws.mean() - phi) <= 3 * se


def test_same_seed_same_weights():
    for dist in ("gaussian", "hutchinson", "random_subset"):
        a = draw_weights(12, 5, dist, RngHub(42).stream("fit"))
        b = draw_weights(12, 5, dist, RngHub(42).stream("fit"))
        assert np.array_equal(a.entries, b.entries)


def test_column_order_independence():
    # the estimate is a sum over columns: permuting columns cannot change it
    rng = np.random.default_rng(8)
    R = rng.standard_normal((4, 6))
    provider = MatrixResiduals(R)
    w = draw_weights(6, 4, "gaussian", rng)
    perm = WeightMatrix(w.entries[:, ::-1].copy(), "gaussian")
    a = misfit_estimate(provider, w)
    b = misfit_estimate(provider, perm)
    assert a == pytest.approx(b, rel=1e-12)


def test_subset_requires_single_nonzero_columns():
    w = WeightMatrix(np.ones((3, 2)), "random_subset")
    with pytest.raises(ValueError, match="one nonzero"):
        misfit_estimate(MatrixResiduals(np.eye(3)), w)
