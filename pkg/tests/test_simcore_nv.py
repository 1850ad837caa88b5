"""NV photophysics: saturation, ODMR line shape, photon statistics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvscope.constants import GAMMA_NV
from nvscope.simcore import (
    NVParams,
    effective_contrast,
    field_projections,
    odmr_rate,
    sample_counts,
    saturation_rate,
)

from oracles import lorentzian_pair_rate


@pytest.fixture()
def nv():
    return NVParams()


def test_saturation_endpoints(nv):
    assert saturation_rate(nv, 0.0) == pytest.approx(nv.dark_rate)
    # at p = p_sat the saturable part is half of r_inf
    got = saturation_rate(nv, nv.p_sat)
    expect = nv.r_inf / 2 + nv.bg_slope * nv.p_sat + nv.dark_rate
    assert got == pytest.approx(expect, rel=1e-12)
    assert got == pytest.approx(1315800.0, rel=1e-12)  # frozen arithmetic


def test_saturation_monotone(nv):
    p = np.linspace(0, 1e-3, 300)
    r = saturation_rate(nv, p)
    assert np.all(np.diff(r) > 0)


def test_field_projections(nv):
    b = 1e-3 * nv.axis
    par, perp = field_projections(nv, b)
    assert par == pytest.approx(1e-3, rel=1e-12)
    assert perp == pytest.approx(0.0, abs=1e-18)
    # perpendicular vector: axis is in the x-z plane, y is orthogonal
    par, perp = field_projections(nv, np.array([0.0, 2e-3, 0.0]))
    assert par == pytest.approx(0.0, abs=1e-18)
    assert perp == pytest.approx(2e-3, rel=1e-12)


def test_effective_contrast_quench(nv):
    assert effective_contrast(nv, 0.0) == pytest.approx(nv.contrast0)
    assert effective_contrast(nv, nv.b_quench) == pytest.approx(nv.contrast0 / 2)
    assert effective_contrast(nv, 10 * nv.b_quench) < 0.01 * nv.contrast0 * 1.01


def test_odmr_rate_matches_independent_line_shape(nv):
    b_par = 1.5e-3
    b = b_par * nv.axis
    p = 120e-6
    f = np.linspace(nv.d_zfs - 150e6, nv.d_zfs + 150e6, 1201)
    got = odmr_rate(nv, f, b, p)
    baseline = saturation_rate(nv, p)
    ref = lorentzian_pair_rate(
        f,
        d_zfs=nv.d_zfs,
        splitting=2.0 * GAMMA_NV * b_par,
        fwhm=nv.linewidth,
        depth=nv.contrast0 / 2,
        baseline=baseline,
    )
    np.testing.assert_allclose(got, ref, rtol=1e-12)


def test_odmr_zero_field_single_resonance(nv):
    p = 100e-6
    baseline = saturation_rate(nv, p)
    on = odmr_rate(nv, np.array([nv.d_zfs]), np.zeros(3), p)[0]
    # two coincident dips of depth c0/2 each
    assert on == pytest.approx(baseline * (1.0 - nv.contrast0), rel=1e-12)
    far = odmr_rate(nv, np.array([nv.d_zfs + 1e9]), np.zeros(3), p)[0]
    assert far == pytest.approx(baseline, rel=5e-4)


@given(
    b_par=st.floats(min_value=-4e-3, max_value=4e-3),
    df=st.floats(min_value=0.0, max_value=2e8),
)
@settings(max_examples=150, deadline=None)
def test_odmr_symmetric_about_zfs(b_par, df):
    nv = NVParams()
    b = b_par * nv.axis
    lo = odmr_rate(nv, np.array([nv.d_zfs - df]), b, 50e-6)[0]
    hi = odmr_rate(nv, np.array([nv.d_zfs + df]), b, 50e-6)[0]
    assert lo == pytest.approx(hi, rel=1e-9)


def test_dip_positions_shift_with_field(nv):
    b_par = 2e-3
    split = 2 * GAMMA_NV * b_par
    f = np.linspace(nv.d_zfs - 1.5 * split, nv.d_zfs + 1.5 * split, 40001)
    r = odmr_rate(nv, f, b_par * nv.axis, 80e-6)
    # two local minima at d_zfs +/- gamma*b_par
    lo_half = r[: len(r) // 2]
    hi_half = r[len(r) // 2 :]
    f_lo = f[np.argmin(lo_half)]
    f_hi = f[len(r) // 2 + np.argmin(hi_half)]
    df_grid = f[1] - f[0]
    assert f_lo == pytest.approx(nv.d_zfs - GAMMA_NV * b_par, abs=2 * df_grid)
    assert f_hi == pytest.approx(nv.d_zfs + GAMMA_NV * b_par, abs=2 * df_grid)


def test_transverse_field_shrinks_contrast(nv):
    f = np.array([nv.d_zfs])
    r0 = odmr_rate(nv, f, np.zeros(3), 60e-6)[0]
    # add a transverse component equal to the quench scale
    perp_dir = np.array([-nv.axis[2], 0.0, nv.axis[0]])
    r1 = odmr_rate(nv, f, nv.b_quench * perp_dir, 60e-6)[0]
    base = saturation_rate(nv, 60e-6)
    assert r0 == pytest.approx(base * (1 - nv.contrast0), rel=1e-12)
    assert r1 == pytest.approx(base * (1 - nv.contrast0 / 2), rel=1e-12)


def test_sample_counts_statistics():
    rate = np.full(4000, 1e6)
    counts = sample_counts(rate, t_bin=1e-3, seed=9)
    assert counts.dtype.kind in "iu"
    assert counts.mean() == pytest.approx(1000.0, rel=0.01)
    assert counts.var() == pytest.approx(1000.0, rel=0.15)
    again = sample_counts(rate, t_bin=1e-3, seed=9)
    np.testing.assert_array_equal(counts, again)


def test_sample_counts_zero_rate():
    counts = sample_counts(np.zeros(10), t_bin=1e-3, seed=1)
    assert np.all(counts == 0)


def test_sample_counts_overflow_guard():
    with pytest.raises(ValueError):
        sample_counts(np.array([1e25]), t_bin=1.0, seed=0)
