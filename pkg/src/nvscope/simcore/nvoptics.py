"""NV photophysics: saturation baseline, ODMR dips, photon shot noise."""

from __future__ import annotations

import numpy as np

from .params import NVParams

# Poisson means beyond 2^63 cannot be represented as integer counts
_MAX_POISSON_MEAN = 2.0**63


def saturation_rate(nv: NVParams, p_opt):
    """Off-resonance fluorescence rate at optical power p_opt, counts/s.

    r_inf * p / (p + p_sat) + bg_slope * p + dark_rate.  Scalar in,
    scalar out; arrays broadcast.
    """
    p = np.asarray(p_opt, dtype=float)
    if np.any(p < 0):
        raise ValueError("p_opt must be >= 0")
    rate = nv.r_inf * p / (p + nv.p_sat) + nv.bg_slope * p + nv.dark_rate
    return float(rate) if np.isscalar(p_opt) else rate


def field_projections(nv: NVParams, b_field) -> tuple[float, float]:
    """(B_parallel, B_perp) of a field vector relative to the NV axis, T."""
    b = np.asarray(b_field, dtype=float)
    axis = nv.axis
    b_par = float(b @ axis)
    b_perp = float(np.linalg.norm(b - b_par * axis))
    return b_par, b_perp


def effective_contrast(nv: NVParams, b_perp: float) -> float:
    """Total ODMR contrast quenched by the transverse field component."""
    return nv.contrast0 / (1.0 + (b_perp / nv.b_quench) ** 2)


def _lorentzian(f, f0: float, fwhm: float):
    half = fwhm / 2.0
    return half * half / ((f - f0) ** 2 + half * half)


def odmr_rate(nv: NVParams, f_mw, b_field, p_opt: float) -> np.ndarray:
    """Expected CW-ODMR fluorescence rate at microwave frequency f_mw, counts/s.

    Baseline saturation rate multiplied by (1 - sum of two equal-depth
    Lorentzian dips) at f = d_zfs +/- gamma * B_parallel, each of depth
    contrast_eff/2 and FWHM = linewidth. contrast_eff is quenched by the
    transverse field component.
    """
    f_mw = np.asarray(f_mw, dtype=float)
    base = saturation_rate(nv, p_opt)
    b_par, b_perp = field_projections(nv, b_field)
    c_eff = effective_contrast(nv, b_perp)
    f_minus = nv.d_zfs - nv.gamma * b_par
    f_plus = nv.d_zfs + nv.gamma * b_par
    dips = 0.5 * c_eff * (
        _lorentzian(f_mw, f_minus, nv.linewidth)
        + _lorentzian(f_mw, f_plus, nv.linewidth)
    )
    return base * (1.0 - dips)


def sample_counts(rate, t_bin: float, seed):
    """Poisson photon counts for expected rate (counts/s) over t_bin seconds.

    rate may be array-like; one draw per element, deterministic per seed.
    """
    rate = np.asarray(rate, dtype=float)
    if np.any(rate < 0):
        raise ValueError("rate must be >= 0")
    if t_bin <= 0:
        raise ValueError("t_bin must be > 0")
    mean = rate * t_bin
    if np.any(mean > _MAX_POISSON_MEAN):
        raise ValueError("Poisson mean exceeds 2^63; reduce t_bin")
    rng = np.random.default_rng(seed)
    return rng.poisson(mean)
