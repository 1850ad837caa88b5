"""Tuning-fork calibration: effective mass, Brownian transduction,
displacement/force conversion, approach curves and PLL suggestions."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import polygamma, psi

from .constants import K_B
from .fitkit import NoFeatureError, fit, initial_guess
from .session import Instrument
from .simcore import sweep_resonance, sample_psd_measurement

log = logging.getLogger(__name__)

SAFETY_FLOOR = 0.30  # abort approach work below this fraction of free amplitude


class CalibrationError(RuntimeError):
    """Brownian calibration could not produce a usable record."""


class OutOfRangeError(ValueError):
    """Requested setpoint lies outside the measured curve."""


@dataclass(frozen=True)
class ModeShapeMesh:
    """Discretized mode shape: per-cell volume, density and displacement.

    displacement rows are the (possibly 3-component) modal displacement
    normalized to unit magnitude at the tip (max |r| = 1).
    """

    volumes: np.ndarray      # (n,) m^3
    densities: np.ndarray    # (n,) kg/m^3
    displacements: np.ndarray  # (n,) or (n, 3), unit tip displacement

    def __post_init__(self):
        v = np.asarray(self.volumes, dtype=float)
        rho = np.asarray(self.densities, dtype=float)
        r = np.asarray(self.displacements, dtype=float)
        object.__setattr__(self, "volumes", v)
        object.__setattr__(self, "densities", rho)
        object.__setattr__(self, "displacements", r)
        if v.ndim != 1 or len(v) == 0:
            raise ValueError("mesh must contain at least one cell")
        if np.any(v <= 0):
            raise ValueError("cell volumes must be > 0")
        if rho.shape != v.shape or np.any(rho <= 0):
            raise ValueError("densities must be positive, one per cell")
        if r.shape[0] != len(v) or r.ndim not in (1, 2):
            raise ValueError("one displacement (scalar or vector) per cell")

    def magnitudes(self) -> np.ndarray:
        r = self.displacements
        return np.abs(r) if r.ndim == 1 else np.linalg.norm(r, axis=1)


@dataclass
class CalibrationRecord:
    alpha: float          # V/m
    alpha_std: float
    f_res: float          # Hz
    f_res_std: float
    q: float
    q_std: float
    m_eff: float          # kg
    temperature: float    # K
    s_en: float           # V^2/Hz
    timestamp: float = field(default_factory=time.time)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("alpha", "f_res", "q", "m_eff", "temperature"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.s_en < 0 or self.alpha_std < 0 or self.f_res_std < 0 or self.q_std < 0:
            raise ValueError("noise floor and standard errors must be >= 0")


@dataclass
class PsdMeasurement:
    freqs: np.ndarray    # Hz, strictly increasing
    values: np.ndarray   # V^2/Hz
    n_avg: int


@dataclass
class ApproachCurve:
    distances: np.ndarray        # m, ordered far -> near
    amplitude: np.ndarray        # V
    amplitude_std: np.ndarray
    f0: np.ndarray               # Hz
    f0_std: np.ndarray
    q: np.ndarray
    q_std: np.ndarray
    aborted: bool = False
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        arrays = ("distances", "amplitude", "amplitude_std", "f0", "f0_std",
                  "q", "q_std")
        for name in arrays:
            object.__setattr__(self, name,
                               np.atleast_1d(np.asarray(getattr(self, name), float)))
        n = self.distances.size
        if n == 0:
            raise ValueError("approach curve must contain at least one point")
        for name in arrays:
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
        if n > 1:
            diffs = np.diff(self.distances)
            if not (np.all(diffs > 0) or np.all(diffs < 0)):
                raise ValueError("distances must be strictly monotone")
        for name in ("amplitude_std", "f0_std", "q_std"):
            if np.any(getattr(self, name) < 0):
                raise ValueError(f"{name} must be >= 0")

    def __len__(self):
        return len(self.distances)


def effective_mass(mesh: ModeShapeMesh) -> float:
    """Modal mass: sum of rho * |r|^2 * V over the mesh (tip-normalized)."""
    mags = mesh.magnitudes()
    peak = float(np.max(mags))
    if abs(peak - 1.0) > 1e-9:
        raise ValueError(
            f"mode shape must be normalized to unit tip displacement (max |r| = {peak})"
        )
    return float(np.sum(mesh.densities * mags**2 * mesh.volumes))


def measure_noise_floor(session: Instrument, n_bins: int = 2000,
                        n_avg: int = 200) -> float:
    """Electronic noise floor, measured with drive and thermal motion off.

    Simulated as averaged periodogram bins of the bare noise floor; the
    result is held fixed in the Brownian fit.
    """
    rng = session.rng()
    mean = session.fork.s_en
    bins = rng.gamma(shape=n_avg, scale=mean / n_avg, size=n_bins)
    session.advance(n_bins * n_avg * 1e-4)
    return float(np.mean(bins))


def acquire_brownian_psd(session: Instrument, span: float = 40.0,
                         n_bins: int = 800, n_avg: int = 400) -> PsdMeasurement:
    """Averaged thermal-noise voltage PSD around the fork resonance."""
    if session.approached:
        raise CalibrationError("retract the tip before a Brownian calibration")
    fork = session.fork
    f = np.linspace(fork.f_res - span / 2, fork.f_res + span / 2, n_bins)
    seed = session.next_seed()
    values = sample_psd_measurement(fork, f, n_avg=n_avg, seed=seed)
    # each averaged bin needs n_avg records of length ~1/resolution-bandwidth
    rbw = f[1] - f[0]
    session.advance(n_avg / rbw)
    return PsdMeasurement(freqs=f, values=values, n_avg=n_avg)


def brownian_calibrate(psd: PsdMeasurement, temperature: float, m_eff: float,
                       s_en: float, provenance: dict | None = None) -> CalibrationRecord:
    """Fit the thermal PSD with (q, f_res, alpha) free and s_en held fixed.

    The fit runs on log(power); averaged-periodogram bins are gamma
    distributed, so the log-space mean is offset by psi(n) - ln(n) and the
    log-space standard deviation is sqrt(psi'(n)) — both applied exactly.
    """
    f = np.asarray(psd.freqs, dtype=float)
    y = np.asarray(psd.values, dtype=float)
    if psd.n_avg < 2:
        raise ValueError("need n_avg >= 2 for a weighted calibration fit")
    bias = float(psi(psd.n_avg) - np.log(psd.n_avg))
    sigma_ln = float(np.sqrt(polygamma(1, psd.n_avg)))
    y_corr = y * np.exp(-bias)

    try:
        init = initial_guess("psd_lorentzian", f, y_corr)
    except NoFeatureError as exc:
        raise CalibrationError(f"calibration failed: {exc}") from exc
    init[3] = s_en
    res = fit(
        "psd_lorentzian", f, y_corr, sigma_y=sigma_ln, init=init,
        fixed_mask=[False, False, False, True], log_space=True,
    )
    if not res.converged:
        raise CalibrationError("calibration fit did not converge")

    a, f_res, q, _ = res.params
    # a = alpha^2 kB T f_res / (2 pi^3 m_eff q)  =>  alpha^2 = a C q / f_res
    c_const = 2.0 * np.pi**3 * m_eff / (K_B * temperature)
    alpha = float(np.sqrt(a * c_const * q / f_res))
    # d alpha / d(a, f_res, q) = alpha/2 * (1/a, -1/f_res, 1/q)
    grad = 0.5 * alpha * np.array([1.0 / a, -1.0 / f_res, 1.0 / q])
    cov3 = res.covariance[np.ix_([0, 1, 2], [0, 1, 2])]
    alpha_var = float(grad @ cov3 @ grad)
    errs = res.std_errors
    return CalibrationRecord(
        alpha=alpha,
        alpha_std=float(np.sqrt(max(alpha_var, 0.0))),
        f_res=float(f_res),
        f_res_std=float(errs[1]),
        q=float(q),
        q_std=float(errs[2]),
        m_eff=m_eff,
        temperature=temperature,
        s_en=s_en,
        provenance=dict(provenance or {}),
    )


def calibrate_session(session: Instrument, span: float = 40.0, n_bins: int = 800,
                      n_avg: int = 400) -> CalibrationRecord:
    """Full calibration flow: noise floor, Brownian PSD, fit; stores the record."""
    s_en = measure_noise_floor(session)
    psd = acquire_brownian_psd(session, span=span, n_bins=n_bins, n_avg=n_avg)
    record = brownian_calibrate(
        psd, temperature=session.fork.temperature, m_eff=session.fork.m_eff,
        s_en=s_en,
        provenance={"seed": session.seed, "config_hash": session.config_digest},
    )
    session.calibration = record
    return record


def displacement_from_voltage(v_amp: float, record: CalibrationRecord) -> tuple[float, float]:
    """Convert a voltage amplitude to displacement: x = v / alpha, with std."""
    if v_amp < 0:
        raise ValueError("voltage amplitude must be >= 0")
    x = v_amp / record.alpha
    std = v_amp * record.alpha_std / record.alpha**2
    return x, std


def tip_force(displacement: float, k_spring: float) -> float:
    """Static force at a given displacement: F = k x."""
    if not (np.isfinite(displacement) and np.isfinite(k_spring)):
        raise ValueError("inputs must be finite")
    return k_spring * displacement


def _fit_drive_sweep(f, v_meas, sigma_v):
    """Fit one driven resonance sweep; returns (A, f0, q) with stds.

    The squared voltage response has the PSD-Lorentzian shape.  Squared
    readout noise raises the mean by exactly sigma_v^2, so the floor is
    pinned there rather than floated (a narrow sweep never reaches the
    noise floor, which would leave a free floor unconstrained).  Each
    point carries variance 4 V^2 sigma_v^2 + 2 sigma_v^4.
    """
    y = v_meas**2
    sigma_y = np.sqrt(4.0 * np.maximum(y, sigma_v**2) * sigma_v**2 + 2.0 * sigma_v**4)
    init = initial_guess("psd_lorentzian", f, y)
    init[3] = max(sigma_v**2, np.finfo(float).tiny)
    res = fit("psd_lorentzian", f, y, sigma_y=sigma_y, init=init,
              fixed_mask=[False, False, False, True])
    a, f0, q, _ = res.params
    amp = float(np.sqrt(a) * q / f0**2)  # peak height in V
    ea, ef, eq, _ = res.std_errors
    # d amp / d(a, f0, q) = amp * (1/(2a), -2/f0, 1/q)
    grad = amp * np.array([0.5 / a, -2.0 / f0, 1.0 / q])
    cov3 = res.covariance[np.ix_([0, 1, 2], [0, 1, 2])]
    amp_std = float(np.sqrt(max(grad @ cov3 @ grad, 0.0)))
    return (amp, amp_std), (float(f0), float(ef)), (float(q), float(eq)), res.converged


def acquire_approach_curve(session: Instrument, distances, n_avg: int = 16,
                           span: float = 80.0, n_points: int = 320,
                           drive_force: float = 2e-12,
                           t_per_point: float = 2e-3,
                           progress=None) -> ApproachCurve:
    """Resonance sweep and fit at each tip-sample distance, far to near.

    Aborts and retracts if the measured amplitude falls below the safety
    floor (fraction of the free amplitude); the partial curve is returned
    with the aborted flag set.
    """
    d_arr = np.asarray(distances, dtype=float)
    if d_arr.ndim != 1 or len(d_arr) < 2:
        raise ValueError("need at least two distances")
    if np.any(np.diff(d_arr) <= 0):
        raise ValueError("distances must be strictly increasing (far to near)")

    fork, inter = session.fork, session.interaction
    sigma_v = float(np.sqrt(fork.s_en / (2.0 * t_per_point * n_avg)))
    rows = []
    aborted = False
    free_amp = None
    for i, d in enumerate(d_arr):
        session.set_tip_distance(float(d))
        df_true, _, _ = session.frequency_shift()
        center = fork.f_res + df_true
        f = np.linspace(center - span / 2, center + span / 2, n_points)
        v = sweep_resonance(
            fork, inter, distance=float(d), f_grid=f, drive_force=drive_force,
            t_per_point=t_per_point, n_avg=n_avg, seed=session.next_seed(),
        )
        session.advance(t_per_point * n_avg * n_points)
        (amp, amp_std), (f0, f0_std), (q, q_std), ok = _fit_drive_sweep(f, v, sigma_v)
        if not ok:
            log.warning("sweep fit at distance %.3g m did not converge", d)
        rows.append((d, amp, amp_std, f0, f0_std, q, q_std))
        if free_amp is None:
            free_amp = amp
        if progress is not None:
            progress(i + 1, len(d_arr))
        if amp < SAFETY_FLOOR * free_amp:
            log.warning("amplitude below safety floor at %.3g m; retracting", d)
            aborted = True
            session.retract()
            break

    cols = list(zip(*rows))
    return ApproachCurve(
        distances=np.array(cols[0]),
        amplitude=np.array(cols[1]),
        amplitude_std=np.array(cols[2]),
        f0=np.array(cols[3]),
        f0_std=np.array(cols[4]),
        q=np.array(cols[5]),
        q_std=np.array(cols[6]),
        aborted=aborted,
        metadata={
            "n_avg": n_avg, "span": span, "n_points": n_points,
            "drive_force": drive_force, "t_per_point": t_per_point,
        },
    )


def pll_suggest(curve: ApproachCurve, setpoint_shift: float) -> dict:
    """Slope, gains and setpoint distance for PLL-controlled approach.

    The slope comes from 5-point local linear regressions of f0 against
    distance, interpolated to the setpoint crossing (a window centered on
    the nearest grid index alone would bias the slope of a steep
    exponential by O(step/decay)).  Gains follow a documented plumbing
    heuristic: kp = 0.1/|slope| (half the gain for twice the slope) and
    ki = kp / (4 tau) with tau = 0.1 s, a critically damped target.
    """
    if len(curve) < 5:
        raise OutOfRangeError("need at least 5 curve points")
    shift = curve.f0 - curve.f0[0]
    lo, hi = float(np.min(shift)), float(np.max(shift))
    if not (lo <= setpoint_shift <= hi) or hi - lo == 0.0:
        raise OutOfRangeError(
            f"setpoint {setpoint_shift:g} Hz outside measured range [{lo:g}, {hi:g}] Hz"
        )
    # first crossing scanning far -> near
    idx = None
    for i in range(len(shift) - 1):
        s0, s1 = shift[i], shift[i + 1]
        if (s0 - setpoint_shift) * (s1 - setpoint_shift) <= 0.0 and s0 != s1:
            idx = i
            break
    if idx is None:
        raise OutOfRangeError("setpoint shift is never crossed by the curve")
    frac = (setpoint_shift - shift[idx]) / (shift[idx + 1] - shift[idx])
    d_set = float(curve.distances[idx] + frac * (curve.distances[idx + 1] - curve.distances[idx]))

    half = 2
    centers = np.arange(half, len(curve) - half)
    slopes = np.array([
        np.polyfit(curve.distances[c - half:c + half + 1],
                   curve.f0[c - half:c + half + 1], 1)[0]
        for c in centers
    ])
    d_centers = curve.distances[centers]
    order = np.argsort(d_centers)
    slope = float(np.interp(d_set, d_centers[order], slopes[order]))
    if slope == 0.0:
        raise OutOfRangeError("zero local slope at the setpoint")
    tau = 0.1
    kp = 0.1 / abs(slope)
    return {
        "slope": slope,            # Hz/m
        "kp": kp,                  # m/Hz
        "ki": kp / (4.0 * tau),    # m/(Hz s)
        "setpoint_distance": d_set,
        "setpoint_shift": float(setpoint_shift),
    }
