"""ODMR acquisition and interpretation.

Sweeps, dip fitting, frequency-to-field conversion, optical saturation
characterization, and the two magnetic-field sensitivity estimators
(closed formula and repeated-measurement statistics).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .constants import GAMMA_NV
from .fitkit import FitResult, NoFeatureError, fit, initial_guess
from .session import Instrument, StateError
from .simcore.nvoptics import field_projections
from .simcore.params import NVParams

log = logging.getLogger(__name__)

__all__ = [
    "FitFailedError",
    "OdmrFit",
    "OdmrSpectrum",
    "SaturationCurve",
    "SensitivityReport",
    "TrackingSweep",
    "field_from_dips",
    "fit_odmr",
    "measure_saturation",
    "odmr_sweep",
    "sensitivity_empirical",
    "sensitivity_formula",
]


class FitFailedError(RuntimeError):
    """A spectrum fit failed; carries diagnostics for the operator."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OdmrSpectrum:
    """One CW-ODMR sweep: photon counts per microwave frequency."""

    freqs: np.ndarray          # Hz, strictly increasing
    counts: np.ndarray         # photon counts per point
    t_per_point: float         # s
    p_opt: float               # W
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "freqs", np.asarray(self.freqs, float))
        object.__setattr__(self, "counts", np.asarray(self.counts))
        if self.freqs.ndim != 1 or self.freqs.shape != self.counts.shape:
            raise ValueError("freqs and counts must be 1-D and equal length")
        if self.freqs.size < 2 or np.any(np.diff(self.freqs) <= 0):
            raise ValueError("freqs must be strictly increasing")
        if np.any(self.counts < 0):
            raise ValueError("counts must be >= 0")
        if not self.t_per_point > 0:
            raise ValueError("t_per_point must be > 0")

    def __len__(self):
        return len(self.freqs)


@dataclass(frozen=True)
class OdmrFit:
    """Dip parameters extracted from one ODMR spectrum.

    For unresolved spectra the single-dip fallback reports
    f_minus == f_plus (the merged dip center) and single_dip = True.
    Contrast is the total dip contrast (a resolved pair carries half of
    it per dip).
    """

    f_minus: float
    f_minus_std: float
    f_plus: float
    f_plus_std: float
    contrast: float
    contrast_std: float
    linewidth: float
    linewidth_std: float
    single_dip: bool
    fit: FitResult

    @property
    def splitting(self) -> float:
        return self.f_plus - self.f_minus


@dataclass(frozen=True)
class SaturationCurve:
    """Off-resonance fluorescence rate versus optical power."""

    powers: np.ndarray         # W, strictly increasing
    rates: np.ndarray          # counts/s
    rate_std: np.ndarray       # counts/s

    def __post_init__(self):
        for name in ("powers", "rates", "rate_std"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float))
        if self.powers.ndim != 1 or self.powers.shape != self.rates.shape \
                or self.powers.shape != self.rate_std.shape:
            raise ValueError("powers, rates, rate_std must be 1-D, equal length")
        if np.any(self.powers < 0) or np.any(np.diff(self.powers) <= 0):
            raise ValueError("powers must be strictly increasing and >= 0")
        if np.any(self.rate_std < 0):
            raise ValueError("rate_std must be >= 0")

    def __len__(self):
        return len(self.powers)


@dataclass(frozen=True)
class SensitivityReport:
    """Empirical vs formula field sensitivity, with the field histogram."""

    sigma_formula: float       # T/sqrt(Hz)
    sigma_empirical: float     # T/sqrt(Hz)
    sigma_empirical_std: float
    n_meas: int                # successful measurements entering the stats
    t_meas: float              # s per measurement
    bin_edges: np.ndarray      # T
    bin_counts: np.ndarray
    degraded: bool = False
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "bin_edges", np.asarray(self.bin_edges, float))
        object.__setattr__(self, "bin_counts",
                           np.asarray(self.bin_counts, int))
        if not (self.sigma_formula > 0 and self.sigma_empirical > 0):
            raise ValueError("sensitivities must be > 0")
        if self.bin_edges.size != self.bin_counts.size + 1:
            raise ValueError("histogram needs len(edges) == len(counts) + 1")
        if int(self.bin_counts.sum()) != self.n_meas:
            raise ValueError("histogram counts must sum to n_meas")


@dataclass(frozen=True)
class TrackingSweep:
    """Sweep configuration for the empirical sensitivity estimator.

    The tracked dip is the low-frequency branch at the session's bias.
    window_linewidths is deliberately tight (~2): the center-frequency
    error of a swept dip grows as sqrt(window/linewidth), so wide survey
    windows waste measurement time that the closed formula does not
    account for.
    """

    n_points: int = 32
    p_opt: float = 13e-6             # W; ~3e5 counts/s at default photophysics
    window_linewidths: float = 2.0   # tracking window width, in linewidths
    ref_factor: float = 25.0         # reference sweep duration / t_meas
    ref_points: int = 96
    bin_width: float = 0.56e-6       # T, histogram default


# ---------------------------------------------------------------------------
# acquisition
# ---------------------------------------------------------------------------

def odmr_sweep(session: Instrument, f_start: float, f_stop: float,
               n_points: int, t_per_point: float, p_opt: float) -> OdmrSpectrum:
    """Acquire one CW-ODMR spectrum at the current position and bias."""
    session.require_operable()
    if not f_start < f_stop:
        raise ValueError("f_start must be < f_stop")
    if n_points < 8:
        raise ValueError("n_points must be >= 8")
    if t_per_point <= 0:
        raise ValueError("t_per_point must be > 0")
    if p_opt < 0:
        raise ValueError("p_opt must be >= 0")
    freqs = np.linspace(f_start, f_stop, int(n_points))
    counts = session.odmr_counts(freqs, t_per_point, p_opt)
    meta = {
        "x": session.x,
        "y": session.y,
        "tip_distance": session.tip_distance,
        "bias_field": [float(b) for b in session.bias_field],
        "temperature": session.fork.temperature,
    }
    return OdmrSpectrum(freqs=freqs, counts=counts, t_per_point=t_per_point,
                        p_opt=p_opt, metadata=meta)


# ---------------------------------------------------------------------------
# analysis
# ---------------------------------------------------------------------------

def _diagnostics(spec: OdmrSpectrum) -> dict:
    c = spec.counts.astype(float)
    return {
        "n_points": int(len(spec)),
        "count_min": float(c.min()),
        "count_max": float(c.max()),
        "count_median": float(np.median(c)),
        "t_per_point": spec.t_per_point,
    }


def _count_sigma(counts: np.ndarray) -> np.ndarray:
    return np.sqrt(np.maximum(counts.astype(float), 1.0))


def _fit_single(spec: OdmrSpectrum, diag: dict) -> OdmrFit:
    f, y = spec.freqs, spec.counts.astype(float)
    try:
        init = initial_guess("odmr_single_dip", f, y,
                             sigma_y=_count_sigma(spec.counts))
    except NoFeatureError as exc:
        raise FitFailedError(f"no dip found: {exc}", diag) from exc
    res = fit("odmr_single_dip", f, y, sigma_y=_count_sigma(spec.counts),
              init=init)
    if not res.converged:
        diag = dict(diag, chi2_reduced=res.chi2_reduced, n_iter=res.n_iter)
        raise FitFailedError("single-dip fit did not converge", diag)
    _, f0, c, w = res.params
    _, f0_s, c_s, w_s = res.std_errors
    return OdmrFit(f_minus=float(f0), f_minus_std=float(f0_s),
                   f_plus=float(f0), f_plus_std=float(f0_s),
                   contrast=float(c), contrast_std=float(c_s),
                   linewidth=float(w), linewidth_std=float(w_s),
                   single_dip=True, fit=res)


def fit_odmr(spec: OdmrSpectrum) -> OdmrFit:
    """Extract dip frequencies, contrast and linewidth from a spectrum.

    Fits the double-dip model; when the dips are unresolved (fitted
    splitting below half a linewidth) or the double-dip fit cannot be
    supported by the data, falls back to the single-dip model and
    reports f_minus == f_plus.
    """
    f, y = spec.freqs, spec.counts.astype(float)
    diag = _diagnostics(spec)
    try:
        init = initial_guess("odmr_double_dip", f, y,
                             sigma_y=_count_sigma(spec.counts))
    except NoFeatureError as exc:
        raise FitFailedError(f"no dip found: {exc}", diag) from exc
    res = fit("odmr_double_dip", f, y, sigma_y=_count_sigma(spec.counts),
              init=init)
    if not res.converged:
        log.debug("double-dip fit did not converge; trying single-dip")
        return _fit_single(spec, diag)
    _, fm, fp, c, w = res.params
    _, fm_s, fp_s, c_s, w_s = res.std_errors
    if fp < fm:
        fm, fp, fm_s, fp_s = fp, fm, fp_s, fm_s
    if fp - fm < w / 2.0:
        return _fit_single(spec, diag)
    return OdmrFit(f_minus=float(fm), f_minus_std=float(fm_s),
                   f_plus=float(fp), f_plus_std=float(fp_s),
                   contrast=float(c), contrast_std=float(c_s),
                   linewidth=float(w), linewidth_std=float(w_s),
                   single_dip=False, fit=res)


def field_from_dips(f_minus: float, f_plus: float, nv: NVParams,
                    mode: str = "splitting") -> float:
    """Axial field from dip frequencies, in tesla.

    mode="splitting": B = (f_plus - f_minus) / (2 gamma).
    mode="single": track the low-frequency branch, B = (d_zfs - f_minus)/gamma
    (used when only one dip is swept, e.g. during scans).
    """
    if f_plus < f_minus:
        raise ValueError("f_plus must be >= f_minus")
    if mode == "splitting":
        return (f_plus - f_minus) / (2.0 * nv.gamma)
    if mode == "single":
        return (nv.d_zfs - f_minus) / nv.gamma
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# saturation
# ---------------------------------------------------------------------------

def measure_saturation(session: Instrument, powers, t_per_point: float = 0.05,
                       ) -> tuple[SaturationCurve, FitResult]:
    """Measure off-resonance rate vs optical power and fit the saturation law.

    The linear background slope and the dark rate are taken from the
    configured photophysics (determined separately) and held fixed; only
    (r_inf, p_sat) are free.
    """
    session.require_operable()
    powers = np.asarray(powers, float)
    if powers.size < 6:
        raise ValueError("need at least 6 powers")
    if np.any(powers < 0) or np.any(np.diff(powers) <= 0):
        raise ValueError("powers must be strictly increasing and >= 0")
    if t_per_point <= 0:
        raise ValueError("t_per_point must be > 0")
    nv = session.nv
    f_off = nv.d_zfs - 0.5e9  # far off any dip at mT-scale bias fields
    rates = np.empty_like(powers)
    stds = np.empty_like(powers)
    for i, p in enumerate(powers):
        counts = int(session.odmr_counts(np.array([f_off]), t_per_point, float(p))[0])
        rates[i] = counts / t_per_point
        stds[i] = np.sqrt(max(counts, 1)) / t_per_point
    curve = SaturationCurve(powers=powers, rates=rates, rate_std=stds)
    # init from the data (the generic guess assumes densely sampled x):
    # the background-corrected curve approaches r_inf, reaching half the
    # asymptote at p_sat
    y_net = rates - nv.bg_slope * powers - nv.dark_rate
    r0 = max(1.3 * float(y_net.max()), 1.0)
    p0 = float(powers[np.argmin(np.abs(y_net - r0 / 2.0))])
    init = np.array([r0, max(p0, float(powers[0])), nv.bg_slope, nv.dark_rate])
    res = fit("saturation", powers, rates, sigma_y=stds, init=init,
              fixed_mask=[False, False, True, True])
    if not res.converged:
        raise FitFailedError("saturation fit did not converge",
                             {"chi2_reduced": res.chi2_reduced,
                              "n_iter": res.n_iter})
    return curve, res


# ---------------------------------------------------------------------------
# sensitivity
# ---------------------------------------------------------------------------

def sensitivity_formula(contrast: float, linewidth: float, rate: float) -> float:
    """DC field sensitivity of a swept dip, T/sqrt(Hz).

    sigma = (1/gamma) * linewidth / (contrast * sqrt(rate)) with the
    free-electron gyromagnetic ratio; no lineshape prefactor.
    """
    if not (contrast > 0 and linewidth > 0 and rate > 0):
        raise ValueError("contrast, linewidth and rate must be > 0")
    return linewidth / (GAMMA_NV * contrast * np.sqrt(rate))


def sensitivity_empirical(session: Instrument, n_meas: int = 500,
                          t_meas: float = 1.0,
                          sweep: TrackingSweep | None = None) -> SensitivityReport:
    """Empirical sensitivity from repeated fixed-duration measurements.

    Requires the tip retracted (the sensitivity of the bare sensor, far
    from any sample). A long reference sweep establishes the tracked dip
    and the formula inputs (contrast, linewidth, rate); n_meas short
    sweeps then each yield a field estimate, and the per-root-hertz
    sensitivity is std(B) * sqrt(t_meas) with a bootstrap error bar.
    """
    session.require_operable()
    if session.approached:
        raise StateError("retract the tip: sensitivity is measured far "
                         "from the sample")
    if n_meas < 100:
        raise ValueError("n_meas must be >= 100")
    if t_meas <= 0:
        raise ValueError("t_meas must be > 0")
    sweep = sweep or TrackingSweep()
    nv = session.nv

    # --- reference sweep: find the tracked dip and the formula inputs
    b_par0, _ = field_projections(nv, session.bias_field)
    f_nominal = nv.d_zfs - nv.gamma * b_par0  # low-frequency branch
    ref_halfspan = 3.0 * nv.linewidth
    t_ref = sweep.ref_factor * t_meas
    ref_spec = odmr_sweep(session, f_nominal - ref_halfspan,
                          f_nominal + ref_halfspan, sweep.ref_points,
                          t_ref / sweep.ref_points, sweep.p_opt)
    ref = _fit_single(ref_spec, _diagnostics(ref_spec))
    base_ref = float(ref.fit.params[0])
    rate_ref = base_ref / ref_spec.t_per_point
    sigma_formula = sensitivity_formula(ref.contrast, ref.linewidth, rate_ref)

    # --- tracking sweeps
    n_pts = int(sweep.n_points)
    t_pt = t_meas / n_pts
    half = sweep.window_linewidths * ref.linewidth / 2.0
    freqs = np.linspace(ref.f_minus - half, ref.f_minus + half, n_pts)
    init = np.array([base_ref * t_pt / ref_spec.t_per_point,
                     ref.f_minus, ref.contrast, ref.linewidth])
    fields = []
    n_failed = 0
    for _ in range(int(n_meas)):
        counts = session.odmr_counts(freqs, t_pt, sweep.p_opt)
        res = fit("odmr_single_dip", freqs, counts.astype(float),
                  sigma_y=_count_sigma(counts), init=init.copy())
        if res.converged:
            fields.append(field_from_dips(res.params[1], res.params[1], nv,
                                          mode="single"))
        else:
            n_failed += 1
    if len(fields) < 2:
        raise FitFailedError("too few successful tracking fits",
                             {"n_failed": n_failed, "n_meas": n_meas})
    b = np.array(fields)
    degraded = n_failed > 0.10 * n_meas
    sigma_emp = float(np.std(b, ddof=1) * np.sqrt(t_meas))

    # bootstrap error on the empirical sigma
    rng = np.random.default_rng(session.next_seed())
    boot = np.std(rng.choice(b, size=(200, b.size), replace=True),
                  axis=1, ddof=1) * np.sqrt(t_meas)
    sigma_emp_std = float(np.std(boot, ddof=1))

    # histogram on a grid of bin_width bins centered on the mean
    w = sweep.bin_width
    mid = float(np.mean(b))
    n_lo = int(np.ceil((mid - b.min()) / w - 0.5))
    n_hi = int(np.ceil((b.max() - mid) / w - 0.5))
    edges = mid + w * (np.arange(-n_lo, n_hi + 1) + 0.5)
    edges = np.concatenate(([mid - w * (n_lo + 0.5)], edges))
    counts_hist, edges = np.histogram(b, bins=edges)

    return SensitivityReport(
        sigma_formula=sigma_formula,
        sigma_empirical=sigma_emp,
        sigma_empirical_std=sigma_emp_std,
        n_meas=len(b),
        t_meas=t_meas,
        bin_edges=edges,
        bin_counts=counts_hist,
        degraded=degraded,
        metadata={
            "n_requested": int(n_meas),
            "n_failed": int(n_failed),
            "mode": "single",
            "p_opt": sweep.p_opt,
            "window_hz": 2.0 * half,
            "n_points": n_pts,
            "f_track": ref.f_minus,
            "contrast_ref": ref.contrast,
            "contrast_ref_std": ref.contrast_std,
            "linewidth_ref": ref.linewidth,
            "linewidth_ref_std": ref.linewidth_std,
            "rate_ref": rate_ref,
            "bias_field": [float(x) for x in session.bias_field],
            "mean_field": mid,
        },
    )
