"""Tuning-fork physics: thermal spectra, driven sweeps, tip-sample response."""

from __future__ import annotations

import math

import numpy as np

from ..constants import K_B
from .params import TipSampleInteraction, TuningForkParams


def thermal_displacement_psd(params: TuningForkParams, f) -> np.ndarray:
    """One-sided Brownian displacement PSD S_x(f) of the shear mode, m^2/Hz.

    S_x(f) = k_B T f_res / (2 pi^3 m_eff Q ((f^2 - f_res^2)^2 + (f f_res/Q)^2))
    """
    f = np.asarray(f, dtype=float)
    if np.any(f <= 0):
        raise ValueError("f must be > 0")
    f0, q = params.f_res, params.q_factor
    denom = (f * f - f0 * f0) ** 2 + (f * f0 / q) ** 2
    num = K_B * params.temperature * f0
    out = num / (2 * math.pi**3 * params.m_eff * q * denom)
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite PSD (degenerate fork parameters)")
    return out


def thermal_psd(params: TuningForkParams, f) -> np.ndarray:
    """Detected voltage PSD alpha^2 * S_x(f) + S_eN, V^2/Hz."""
    out = params.alpha**2 * thermal_displacement_psd(params, f) + params.s_en
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite PSD (degenerate fork parameters)")
    return out


def sample_psd_measurement(params: TuningForkParams, f_grid, n_avg: int, seed) -> np.ndarray:
    """Simulate a Welch-averaged PSD measurement of the Brownian spectrum.

    Each bin is an independent Gamma(shape=n_avg) draw with mean
    thermal_psd(f): the distribution of an n_avg-average of exponential
    periodogram bins, relative std 1/sqrt(n_avg). Deterministic per seed.
    """
    f_grid = np.asarray(f_grid, dtype=float)
    if f_grid.size == 0:
        raise ValueError("empty frequency grid")
    if np.any(np.diff(f_grid) <= 0):
        raise ValueError("f_grid must be strictly increasing")
    if n_avg < 1:
        raise ValueError("n_avg must be >= 1")
    mean = thermal_psd(params, f_grid)
    rng = np.random.default_rng(seed)
    return rng.gamma(shape=float(n_avg), scale=mean / n_avg)


def interaction_response(
    inter: TipSampleInteraction,
    fork: TuningForkParams,
    distance: float,
) -> tuple[float, float, float]:
    """Tip-sample response at a given distance: (delta_f, q_eff, amp_factor).

    Distance uses the approach-curve convention: 0 at the contact point,
    negative out of contact, positive pressed. delta_f grows as
    df_max*exp(d/decay_len) out of contact and linearly past contact;
    damping reduces q_eff (and the on-resonance amplitude factor
    q_eff/Q) toward contact, saturating at the contact-point value.
    """
    d = float(distance)
    if not math.isfinite(d):
        raise ValueError("distance must be finite")
    if d <= 0:
        envelope = math.exp(d / inter.decay_len)
        delta_f = inter.df_max * envelope
    else:
        envelope = 1.0
        delta_f = inter.df_max + inter.contact_stiffening * d
    q_eff = fork.q_factor / (1.0 + inter.damping_scale * envelope)
    amp_factor = q_eff / fork.q_factor
    return delta_f, q_eff, amp_factor


def driven_amplitude(fork: TuningForkParams, f, f0: float, q: float, force: float) -> np.ndarray:
    """Steady-state displacement amplitude of the driven fork, m.

    |x(f)| = (F/m_eff) / ((2 pi)^2 sqrt((f0^2 - f^2)^2 + (f f0/Q)^2));
    at resonance this is the familiar F*Q/k.
    """
    f = np.asarray(f, dtype=float)
    denom = np.sqrt((f0 * f0 - f * f) ** 2 + (f * f0 / q) ** 2)
    return force / (fork.m_eff * (2 * math.pi) ** 2 * denom)


def sweep_resonance(
    fork: TuningForkParams,
    inter: TipSampleInteraction,
    distance: float,
    f_grid,
    drive_force: float,
    t_per_point: float,
    n_avg: int,
    seed,
) -> np.ndarray:
    """Simulate a lock-in amplitude sweep of the (possibly shifted) resonance.

    Returns measured voltage amplitudes: alpha * |x(f)| plus white readout
    noise of std sqrt(S_eN / (2 t_per_point * n_avg)) per point.
    """
    f_grid = np.asarray(f_grid, dtype=float)
    if f_grid.size == 0:
        raise ValueError("empty frequency grid")
    if t_per_point <= 0:
        raise ValueError("t_per_point must be > 0")
    delta_f, q_eff, _ = interaction_response(inter, fork, distance)
    f0 = fork.f_res + delta_f
    v_true = fork.alpha * driven_amplitude(fork, f_grid, f0, q_eff, drive_force)
    sigma = math.sqrt(fork.s_en / (2 * t_per_point * max(n_avg, 1)))
    rng = np.random.default_rng(seed)
    return v_true + rng.normal(0.0, sigma, size=f_grid.shape)
