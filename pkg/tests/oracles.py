"""Independent reference implementations used to pin down expected values.

Everything here is deliberately brute-force and shares no code with the
package under test: fields come from direct dipole-line summation on a
discretized magnetization sheet, integrals from dense trapezoid quadrature.
Slow is fine; these only run inside the test suite.
"""

from __future__ import annotations

import numpy as np

MU_0 = 1.25663706212e-6


def dipole_sum_field(
    sample,
    x_eval,
    z_eval,
    n_periods: int = 150,
    pts_per_period: int = 4096,
    kernel_halfwidth: float = 6.0,
):
    """Brute-force stray field of a striped out-of-plane moment sheet.

    The sheet is discretized into 2-D dipole lines of moment-per-length
    p_i = m(x_i) * dx.  The ideal square-wave domain pattern is smoothed by
    direct spatial convolution with a unit-area Gaussian of width
    ``wall_width`` (no Fourier methods anywhere).  Each line contributes

        Bx = (mu0 p / 2 pi) * 2 x z / r^4
        Bz = (mu0 p / 2 pi) * (z^2 - x^2) / r^4

    which is the field of a z-oriented dipole line at the origin.

    Returns an (N, 3) array of (Bx, 0, Bz) at the requested points.
    """
    lam = sample.stripe_period
    w = sample.wall_width
    m0 = sample.moment_areal
    x0 = sample.pattern_phase

    dx = lam / pts_per_period
    ncells = (2 * n_periods + 1) * pts_per_period
    xs = (np.arange(ncells) - ncells // 2 + 0.5) * dx

    sq = np.sign(np.sin(2.0 * np.pi * (xs - x0) / lam))
    sq[sq == 0.0] = 1.0
    if not sample.easy_axis_oop:
        raise NotImplementedError("oracle covers out-of-plane sheets only")

    nk = int(round(kernel_halfwidth * w / dx))
    kx = np.arange(-nk, nk + 1) * dx
    kern = np.exp(-0.5 * (kx / w) ** 2)
    kern /= kern.sum()
    profile = np.convolve(sq, kern, mode="same")

    pref = MU_0 * m0 * dx / (2.0 * np.pi) * profile

    x_eval = np.atleast_1d(np.asarray(x_eval, dtype=float))
    z_eval = np.atleast_1d(np.asarray(z_eval, dtype=float))
    out = np.zeros((x_eval.size, 3))
    for i, (xe, ze) in enumerate(zip(x_eval.ravel(), z_eval.ravel())):
        rx = xe - xs
        r2 = rx * rx + ze * ze
        inv_r4 = 1.0 / (r2 * r2)
        out[i, 0] = np.sum(pref * (2.0 * rx * ze) * inv_r4)
        out[i, 2] = np.sum(pref * (ze * ze - rx * rx) * inv_r4)
    return out


def trapezoid_psd_integral(psd_func, f_lo, f_hi, n=2_000_001):
    """Dense trapezoid quadrature of a PSD over [f_lo, f_hi]."""
    f = np.linspace(f_lo, f_hi, n)
    return np.trapezoid(psd_func(f), f)


def lorentzian_pair_rate(f, d_zfs, splitting, fwhm, depth, baseline):
    """Direct two-dip ODMR rate, written independently of the package."""
    f = np.asarray(f, dtype=float)
    out = np.ones_like(f)
    for sign in (-1.0, +1.0):
        f0 = d_zfs + sign * 0.5 * splitting
        out = out - depth / (1.0 + (2.0 * (f - f0) / fwhm) ** 2)
    return baseline * out
