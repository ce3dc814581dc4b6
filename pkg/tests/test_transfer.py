import numpy as np
import pytest

from dcinv.grid import build_grid
from dcinv.transfer import (
    TransferFunction,
    bounds_transfer,
    initial_guess,
    level_set_transfer,
    psi,
    psi_prime,
)


def test_midpoint_at_zero():
    tf = bounds_transfer(0.2, 1.4)
    assert psi(0.0, tf) == pytest.approx(0.8, abs=1e-15)


def test_saturation_limits():
    tf = bounds_transfer(0.1, 1.0)
    assert psi(1e6, tf) == pytest.approx(1.0, abs=1e-12)
    assert psi(-1e6, tf) == pytest.approx(0.1, abs=1e-12)


def test_bounds_recipe_with_headroom():
    # sigma in [0.1, 1]: alpha2 = 1.2 * 1, alpha1 = 0.1 / 1.2
    tf = bounds_transfer(0.1 / 1.2, 1.2 * 1.0)
    assert tf.alpha2 == pytest.approx(1.2)
    assert tf.alpha1 == pytest.approx(0.08333333333333333)
    assert psi(0.0, tf) == pytest.approx((0.1 / 1.2 + 1.2) / 2)


def test_prime_at_zero_is_inverse_theta():
    for theta in (1.0, 0.03125):
        tf = TransferFunction("bounds", theta, 0.1, 1.0)
        assert psi_prime(0.0, tf) == pytest.approx(1.0 / theta, rel=1e-14)


def test_prime_matches_finite_difference():
    # |tau| capped where the central difference is still resolvable in
    # float64; the saturated tail is checked separately below
    rng = np.random.default_rng(7)
    tf = bounds_transfer(0.0833, 1.2)
    taus = rng.uniform(-2.5, 2.5, size=100)
    for tau in taus:
        step = 1e-6 * max(1.0, abs(tau))
        fd = (psi(tau + step, tf) - psi(tau - step, tf)) / (2 * step)
        assert psi_prime(tau, tf) == pytest.approx(fd, rel=1e-6)


def test_prime_saturates():
    tf = TransferFunction("bounds", 2.0, 0.1, 1.0)
    tau = 20.0 * tf.alpha * tf.theta
    assert psi_prime(tau, tf) < 1e-15 / tf.theta
    assert psi_prime(-tau, tf) < 1e-15 / tf.theta


def test_monotone_and_bounded():
    tf = bounds_transfer(0.1, 1.0)
    # strict monotonicity and strict bounds hold wherever tanh is not yet
    # saturated to +-1.0 in float64
    scale = tf.alpha * tf.theta
    taus = np.linspace(-12 * scale, 12 * scale, 2001)
    vals = psi(taus, tf)
    assert np.all(np.diff(vals) > 0)
    assert np.all(vals > tf.alpha1)
    assert np.all(vals < tf.alpha2)
    wide = np.linspace(-50, 50, 2001)
    assert np.all(psi(wide, tf) >= tf.alpha1)
    assert np.all(psi(wide, tf) <= tf.alpha2)
    assert np.all(psi_prime(taus, tf) > 0)


def test_level_set_ties_theta_to_h():
    tf = level_set_transfer(0.1, 1.0, h=1.0 / 17)
    assert tf.theta == 1.0 / 17
    assert tf.kind == "level_set"


def test_invalid_parameters():
    with pytest.raises(ValueError):
        TransferFunction("bounds", 1.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        TransferFunction("bounds", 1.0, -0.1, 1.0)
    with pytest.raises(ValueError):
        TransferFunction("wiggle", 1.0, 0.1, 1.0)


def test_initial_guess_bounds_is_zero():
    g = build_grid(2, 8)
    tf = bounds_transfer(0.1, 1.0)
    assert np.all(initial_guess(g, tf) == 0.0)


def test_initial_guess_level_set_saturates_blob():
    g = build_grid(3, 8)
    tf = level_set_transfer(0.1, 1.0, h=g.h[0])
    m0 = initial_guess(g, tf)
    sig = tf.sigma(m0)
    # center cell near the high level, corner cell near the low level
    center = g.cell_index((4, 4, 4))
    corner = g.cell_index((0, 0, 0))
    assert sig[center] > 0.9 * tf.alpha2
    assert sig[corner] < 1.3 * tf.alpha1
    assert 0.0 < np.mean(sig > 0.5) < 0.5  # rounded blob occupies a minority volume
