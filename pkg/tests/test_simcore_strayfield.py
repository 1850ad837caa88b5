"""Stray-field model vs a brute-force dipole-summation reference."""

import numpy as np
import pytest

from nvscope.simcore import SampleModel, stray_field

from oracles import dipole_sum_field


@pytest.fixture(scope="module")
def sample():
    return SampleModel()


def test_matches_dipole_sum_at_random_points(sample):
    rng = np.random.default_rng(2024)
    n = 25
    x = rng.uniform(-2 * sample.stripe_period, 2 * sample.stripe_period, n)
    z = np.exp(rng.uniform(np.log(15e-9), np.log(200e-9), n))
    got = stray_field(sample, x, z)
    ref = dipole_sum_field(sample, x, z)
    rel = np.linalg.norm(got - ref, axis=-1) / np.linalg.norm(ref, axis=-1)
    assert rel.max() < 0.005


def test_matches_dipole_sum_nondefault_sample():
    sample = SampleModel(
        stripe_period=180e-9, moment_areal=1.1e-4, wall_width=12e-9,
        pattern_phase=37e-9,
    )
    rng = np.random.default_rng(5)
    x = rng.uniform(0, sample.stripe_period, 8)
    z = np.exp(rng.uniform(np.log(20e-9), np.log(120e-9), 8))
    got = stray_field(sample, x, z)
    ref = dipole_sum_field(sample, x, z)
    rel = np.linalg.norm(got - ref, axis=-1) / np.linalg.norm(ref, axis=-1)
    assert rel.max() < 0.005


def test_periodicity(sample):
    x = np.linspace(0, sample.stripe_period, 17)
    b1 = stray_field(sample, x, np.full_like(x, 60e-9))
    b2 = stray_field(sample, x + 3 * sample.stripe_period, np.full_like(x, 60e-9))
    assert np.allclose(b1, b2, rtol=1e-9, atol=1e-15)


def test_far_field_decays(sample):
    b = stray_field(sample, np.array([0.1e-9]), np.array([100 * sample.stripe_period]))
    assert np.linalg.norm(b) < 1e-12


def test_divergence_free(sample):
    # central-difference divergence in the x-z plane (B_y = 0, d/dy = 0)
    h = sample.stripe_period / 2000.0
    rng = np.random.default_rng(11)
    x = rng.uniform(0, sample.stripe_period, 10)
    z = rng.uniform(25e-9, 120e-9, 10)
    bxp = stray_field(sample, x + h, z)[:, 0]
    bxm = stray_field(sample, x - h, z)[:, 0]
    bzp = stray_field(sample, x, z + h)[:, 2]
    bzm = stray_field(sample, x, z - h)[:, 2]
    div = (bxp - bxm + bzp - bzm) / (2 * h)
    scale = np.linalg.norm(stray_field(sample, x, z), axis=-1) / h
    assert np.all(np.abs(div) < 1e-6 * scale)


def test_by_always_zero(sample):
    b = stray_field(sample, np.linspace(0, 1e-6, 50), np.full(50, 40e-9))
    assert np.all(b[:, 1] == 0.0)


def test_rejects_nonpositive_height(sample):
    with pytest.raises(ValueError):
        stray_field(sample, np.array([0.0]), np.array([0.0]))
    with pytest.raises(ValueError):
        stray_field(sample, np.array([0.0]), np.array([-10e-9]))


def test_phase_shifts_pattern(sample):
    shifted = SampleModel(
        stripe_period=sample.stripe_period,
        moment_areal=sample.moment_areal,
        wall_width=sample.wall_width,
        pattern_phase=55e-9,
    )
    x = np.linspace(0, sample.stripe_period, 13)
    z = np.full_like(x, 65e-9)
    b_ref = stray_field(sample, x + 55e-9, z)
    b_shift = stray_field(shifted, x + 55e-9 - 0.0, z)  # same lab coordinates
    # shifting the pattern by p moves the field pattern by p
    b_moved = stray_field(shifted, x + 55e-9, z)
    np.testing.assert_allclose(b_moved, stray_field(sample, x, z), rtol=1e-9, atol=1e-16)
    assert not np.allclose(b_ref, b_shift, rtol=1e-3)


def test_broadcasting_scalar_and_grid(sample):
    b = stray_field(sample, 10e-9, 65e-9)
    assert b.shape == (3,)
    xg, zg = np.meshgrid(np.linspace(0, 100e-9, 4), np.linspace(30e-9, 90e-9, 5))
    bg = stray_field(sample, xg, zg)
    assert bg.shape == (5, 4, 3)
    assert bg[2, 1] == pytest.approx(
        stray_field(sample, xg[2, 1], zg[2, 1]), rel=1e-12
    )
