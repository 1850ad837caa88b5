"""Scan orchestration: tip approach, lift, raster field maps, cross sections.

Workflow: after calibration, `approach` steps the tip in until the PLL
frequency shift reaches a setpoint, `lift` retracts to a fixed standoff,
and `run_scan` rasters the grid acquiring one ODMR spectrum per pixel,
converting dip positions to the field projection along the NV axis.
`cross_section` extracts a grid line from a map and fits Gaussian peaks
to quantify spatial resolution.

Pixels are seeded by (scan_seed, ix, iy, attempt), so a map is
reproducible pixel-for-pixel regardless of acquisition order.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .calib import SAFETY_FLOOR, OutOfRangeError
from .fitkit import FitResult, NoFeatureError, fit, initial_guess
from .sensing import FitFailedError, OdmrSpectrum, field_from_dips, fit_odmr
from .session import MOVE_TIME, Instrument, StateError
from .simcore.nvoptics import field_projections, odmr_rate
from .simcore.strayfield import stray_field

log = logging.getLogger(__name__)

FWHM_FACTOR = 2.0 * math.sqrt(2.0 * math.log(2.0))  # 2.3548200450309493

MAX_PRESS = 0.5e-9  # m past contact before approach gives up

FLAG_OK = 0
FLAG_RETRIED = 1      # succeeded on the second attempt
FLAG_FAILED = 2       # no usable fit after retry
FLAG_QUENCHED = 3     # fit ok but contrast below the quench threshold
FLAG_TIMEOUT = 4      # pixel time budget exhausted before a usable fit
FLAG_NOT_SCANNED = 5  # scan aborted before reaching this pixel
FLAG_NAMES = {
    FLAG_OK: "ok",
    FLAG_RETRIED: "retried",
    FLAG_FAILED: "failed",
    FLAG_QUENCHED: "quenched",
    FLAG_TIMEOUT: "timeout",
    FLAG_NOT_SCANNED: "not_scanned",
}
VALID_FLAGS = (FLAG_OK, FLAG_RETRIED)

QUENCH_FRACTION = 0.25  # of nominal contrast


class SafetyTripError(RuntimeError):
    """Tip interaction crossed the safety floor; the tip was retracted."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepSettings:
    """Per-pixel ODMR sweep parameters.

    The sweep window is static for the whole scan, sized from the bias
    field plus `stray_span` (the largest field magnitude the sample is
    expected to add along the NV axis). `shot_noise=False` records the
    exact expected counts instead of Poisson draws.
    """

    n_points: int = 96
    t_per_point: float = 6e-3
    p_opt: float = 13e-6
    stray_span: float = 2e-3
    shot_noise: bool = True

    def __post_init__(self):
        if int(self.n_points) < 8:
            raise ValueError("n_points must be >= 8")
        object.__setattr__(self, "n_points", int(self.n_points))
        if not self.t_per_point > 0:
            raise ValueError("t_per_point must be > 0")
        if self.p_opt < 0:
            raise ValueError("p_opt must be >= 0")
        if self.stray_span < 0:
            raise ValueError("stray_span must be >= 0")

    @property
    def sweep_time(self) -> float:
        return self.n_points * self.t_per_point


@dataclass(frozen=True)
class ScanConfig:
    """Raster-scan geometry and acquisition settings.

    The grid has round(extent/pitch) pixels per axis at positions
    origin + i*pitch, so each extent must be a whole multiple of the
    pitch. `bias_parallel`, when set, is applied along the NV axis at
    scan start so the two dips stay resolved over the whole map.
    """

    extent: tuple[float, float]
    pixel_pitch: float
    origin: tuple[float, float] = (0.0, 0.0)
    lift_height: float = 50e-9
    mode: str = "constant-height"
    sweep: SweepSettings = field(default_factory=SweepSettings)
    timeout_per_pixel: float = 2.0
    bias_parallel: float | None = 2e-3
    extraction: str = "double"
    serpentine: bool = True

    def __post_init__(self):
        if not self.pixel_pitch > 0:
            raise ValueError("pixel_pitch must be > 0")
        ext = tuple(float(e) for e in self.extent)
        if len(ext) != 2 or any(e <= 0 for e in ext):
            raise ValueError("extent must be two positive lengths")
        for e in ext:
            n = round(e / self.pixel_pitch)
            if n < 1 or abs(e - n * self.pixel_pitch) > 1e-9 * e:
                raise ValueError("extent must be a whole multiple of pixel_pitch")
        object.__setattr__(self, "extent", ext)
        object.__setattr__(self, "origin",
                           tuple(float(v) for v in self.origin))
        if self.lift_height < 0:
            raise ValueError("lift_height must be >= 0")
        if self.mode not in ("constant-height", "contact"):
            raise ValueError("mode must be 'constant-height' or 'contact'")
        if self.mode == "contact" and self.lift_height != 0.0:
            raise ValueError("contact mode requires lift_height = 0")
        if self.extraction not in ("double", "single"):
            raise ValueError("extraction must be 'double' or 'single'")
        if self.timeout_per_pixel < self.sweep.sweep_time:
            raise ValueError("timeout_per_pixel shorter than one sweep")

    @property
    def nx(self) -> int:
        return round(self.extent[0] / self.pixel_pitch)

    @property
    def ny(self) -> int:
        return round(self.extent[1] / self.pixel_pitch)

    @property
    def n_pixels(self) -> int:
        return self.nx * self.ny

    @property
    def x_coords(self) -> np.ndarray:
        return self.origin[0] + self.pixel_pitch * np.arange(self.nx)

    @property
    def y_coords(self) -> np.ndarray:
        return self.origin[1] + self.pixel_pitch * np.arange(self.ny)


def estimate_scan_duration(cfg: ScanConfig) -> float:
    """Expected simulated scan time: pixels x (sweep + move), seconds."""
    return cfg.n_pixels * (cfg.sweep.sweep_time + MOVE_TIME)


# ---------------------------------------------------------------------------
# approach and lift
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ApproachResult:
    tip_distance: float
    shift: float
    n_steps: int
    step: float


def approach(session: Instrument, setpoint: float, *, step: float = 0.2e-9,
             t_avg: float = 20e-3, start_distance: float = -8e-9,
             progress=None) -> ApproachResult:
    """Step the tip toward the surface until the shift reaches setpoint.

    Starts from the current position (or `start_distance` if fully
    retracted) and advances by `step` per iteration, reading the PLL
    frequency shift each time. Stops at the first reading at or above
    the setpoint, so the overshoot is below one step plus readout noise.
    If the oscillation amplitude falls under the safety floor the tip is
    retracted and SafetyTripError raised. A session that already reads
    at or above the setpoint is left untouched (idempotent).
    """
    session.require_operable()
    if session.calibration is None:
        raise StateError("calibrate the fork before approaching")
    if not np.isfinite(setpoint) or setpoint <= 0:
        raise ValueError("setpoint must be a positive frequency shift")
    if setpoint > session.interaction.df_max:
        raise OutOfRangeError(
            f"setpoint {setpoint:.3g} Hz above the interaction ceiling "
            f"{session.interaction.df_max:.3g} Hz; unreachable")
    if step <= 0 or t_avg <= 0:
        raise ValueError("step and t_avg must be > 0")

    if session.approached:
        shift = session.read_frequency_shift(t_avg)
        if shift >= setpoint:
            log.info("approach no-op: shift %.3g Hz already at setpoint", shift)
            return ApproachResult(session.tip_distance, shift, 0, step)
        d = session.tip_distance
    else:
        d = float(start_distance)
        session.set_tip_distance(d)

    n_steps = 0
    while True:
        shift = session.read_frequency_shift(t_avg)
        _, _, amp_factor = session.frequency_shift()
        if amp_factor < SAFETY_FLOOR:
            log.warning("safety floor tripped at %.3g m; retracting", d)
            session.retract()
            raise SafetyTripError(
                f"oscillation amplitude fell to {amp_factor:.2f} of free "
                f"(floor {SAFETY_FLOOR}); tip retracted")
        if progress is not None:
            progress(n_steps, d, shift)
        if shift >= setpoint:
            break
        if d >= MAX_PRESS:
            session.retract()
            raise OutOfRangeError(
                "travel exhausted before reaching the setpoint; tip retracted")
        d += step
        session.set_tip_distance(d)
        n_steps += 1
    log.info("approached: %.3g Hz at %.3g m after %d steps", shift, d, n_steps)
    return ApproachResult(d, shift, n_steps, step)


def lift(session: Instrument, height: float) -> float:
    """Retract to a fixed height above contact; returns the NV standoff.

    The tip parks at distance -height from the contact point, so the
    NV-to-surface standoff is height + contact offset + NV depth.
    """
    session.require_operable()
    if not session.approached:
        raise StateError("lift requires an approached tip")
    if not np.isfinite(height) or height < 0:
        raise ValueError("height must be >= 0")
    session.set_tip_distance(-height)
    session.lift_height = float(height)
    return height + session.contact_offset


# ---------------------------------------------------------------------------
# field map
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FieldMap:
    """Grid of field values along the NV axis with per-pixel diagnostics.

    `b` is the sample's field (the applied bias projection is
    subtracted); invalid pixels hold NaN and a non-valid flag, never an
    interpolated value. Raw dip frequencies are kept per pixel.
    """

    b: np.ndarray             # T, (ny, nx); NaN where invalid
    sigma_b: np.ndarray       # T
    f_minus: np.ndarray       # Hz, raw fitted dip
    f_plus: np.ndarray        # Hz
    contrast: np.ndarray
    chi2: np.ndarray
    t_pixel: np.ndarray       # s, simulated acquisition time per pixel
    flags: np.ndarray         # uint8, FLAG_* codes
    config: ScanConfig
    temperature: float
    t_start: float
    t_end: float
    rows_completed: int
    aborted: bool
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = (self.config.ny, self.config.nx)
        grids = ("b", "sigma_b", "f_minus", "f_plus", "contrast", "chi2",
                 "t_pixel")
        for name in grids:
            arr = np.asarray(getattr(self, name), float)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}")
            object.__setattr__(self, name, arr)
        flags = np.asarray(self.flags)
        if flags.shape != shape:
            raise ValueError(f"flags must have shape {shape}")
        if not np.all(np.isin(flags, list(FLAG_NAMES))):
            raise ValueError("unknown flag code")
        object.__setattr__(self, "flags", flags.astype(np.uint8))
        valid = self.valid_mask
        if not np.all(np.isfinite(self.b[valid])):
            raise ValueError("valid pixels must have finite b")
        if not np.all(self.sigma_b[valid] > 0):
            raise ValueError("valid pixels must have sigma_b > 0")
        if np.any(np.isfinite(self.b[~valid])):
            raise ValueError("invalid pixels must have NaN b")
        if not 0 <= self.rows_completed <= self.config.ny:
            raise ValueError("rows_completed out of range")

    @property
    def valid_mask(self) -> np.ndarray:
        return np.isin(self.flags, VALID_FLAGS)

    @property
    def x_coords(self) -> np.ndarray:
        return self.config.x_coords

    @property
    def y_coords(self) -> np.ndarray:
        return self.config.y_coords

    def to_csv(self, path) -> None:
        """Write (x_m, y_m, B_T, sigma_T, flag) rows in grid order."""
        xs, ys = self.x_coords, self.y_coords
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x_m", "y_m", "B_T", "sigma_T", "flag"])
            for iy in range(self.config.ny):
                for ix in range(self.config.nx):
                    w.writerow([repr(float(xs[ix])), repr(float(ys[iy])),
                                repr(float(self.b[iy, ix])),
                                repr(float(self.sigma_b[iy, ix])),
                                FLAG_NAMES[int(self.flags[iy, ix])]])


def _scan_window(cfg: ScanConfig, nv, bias_par: float) -> np.ndarray:
    """Static per-scan sweep frequencies covering the expected dips."""
    margin = 3.0 * nv.linewidth
    if cfg.extraction == "double":
        span = nv.gamma * (abs(bias_par) + cfg.sweep.stray_span) + margin
        lo, hi = nv.d_zfs - span, nv.d_zfs + span
    else:
        center = nv.d_zfs - nv.gamma * bias_par
        half = nv.gamma * cfg.sweep.stray_span + margin
        lo, hi = center - half, center + half
    return np.linspace(lo, hi, cfg.sweep.n_points)


def _pixel_counts(session: Instrument, cfg: ScanConfig, freqs: np.ndarray,
                  seed) -> np.ndarray:
    sw = cfg.sweep
    if sw.shot_noise:
        return session.odmr_counts(freqs, sw.t_per_point, sw.p_opt, seed=seed)
    rates = odmr_rate(session.nv, freqs, session.field_at_nv(), sw.p_opt)
    session.advance(sw.sweep_time)
    return rates * sw.t_per_point


def _fit_pixel(cfg: ScanConfig, freqs: np.ndarray, counts: np.ndarray, nv,
               sw: SweepSettings):
    """(b_par, sigma, f_minus, f_plus, contrast, chi2) for one spectrum."""
    if cfg.extraction == "double":
        spec = OdmrSpectrum(freqs=freqs, counts=counts,
                            t_per_point=sw.t_per_point, p_opt=sw.p_opt)
        ft = fit_odmr(spec)
        if ft.single_dip:
            # the scan bias is chosen to keep the dips resolved, so a
            # merged-dip result is a failed measurement, not zero field
            raise FitFailedError("unresolved splitting in double extraction",
                                 {"f0": ft.f_minus})
        b_par = field_from_dips(ft.f_minus, ft.f_plus, nv)
        sigma = math.hypot(ft.f_minus_std, ft.f_plus_std) / (2.0 * nv.gamma)
        return (b_par, sigma, ft.f_minus, ft.f_plus, ft.contrast,
                ft.fit.chi2_reduced)
    y = counts.astype(float)
    sigma_y = np.sqrt(np.maximum(y, 1.0))
    try:
        init = initial_guess("odmr_single_dip", freqs, y, sigma_y=sigma_y)
    except NoFeatureError as exc:
        raise FitFailedError(str(exc), {"n_points": len(freqs)}) from exc
    res: FitResult = fit("odmr_single_dip", freqs, y, sigma_y=sigma_y,
                         init=init)
    if not res.converged:
        raise FitFailedError("single-dip pixel fit did not converge",
                             {"n_points": len(freqs)})
    f0 = float(res.params[1])
    b_par = field_from_dips(f0, f0, nv, mode="single")
    sigma = float(res.std_errors[1]) / nv.gamma
    return (b_par, sigma, f0, f0, float(res.params[2]), res.chi2_reduced)


def run_scan(session: Instrument, cfg: ScanConfig, *, on_row=None,
             should_abort=None, progress=None) -> FieldMap:
    """Raster the configured grid and return the field map.

    Requires an approached session; the configured lift is applied
    before scanning. Rows alternate direction when cfg.serpentine. Each
    completed row is passed to `on_row(iy, row)` as plain arrays (the
    concatenation of streamed rows equals the returned map). A pixel
    whose fit fails is retried once with an independent seed, within its
    time budget; remaining failures are flagged, never interpolated.
    `should_abort()` is polled between pixels; aborting discards only
    the row in progress.
    """
    session.require_operable()
    if not session.approached:
        raise StateError("approach before scanning")
    nv = session.nv
    if cfg.bias_parallel is not None:
        session.set_bias(cfg.bias_parallel * nv.axis)
    lift(session, cfg.lift_height)

    bias_par, _ = field_projections(nv, session.bias_field)
    freqs = _scan_window(cfg, nv, bias_par)
    scan_seed = int(session.rng().integers(2 ** 63))
    nx, ny = cfg.nx, cfg.ny
    nominal = nv.contrast0 if cfg.extraction == "double" else nv.contrast0 / 2

    shape = (ny, nx)
    b = np.full(shape, np.nan)
    sigma_b = np.full(shape, np.nan)
    f_minus = np.full(shape, np.nan)
    f_plus = np.full(shape, np.nan)
    contrast = np.full(shape, np.nan)
    chi2 = np.full(shape, np.nan)
    t_pixel = np.full(shape, np.nan)
    flags = np.full(shape, FLAG_NOT_SCANNED, dtype=np.uint8)
    grids = (b, sigma_b, f_minus, f_plus, contrast, chi2, t_pixel, flags)
    names = ("b", "sigma_b", "f_minus", "f_plus", "contrast", "chi2",
             "t_pixel", "flags")

    xs, ys = cfg.x_coords, cfg.y_coords
    t_start = session.clock
    aborted = False
    rows_completed = 0
    n_done = 0
    for iy in range(ny):
        order = range(nx)
        if cfg.serpentine and iy % 2 == 1:
            order = reversed(order)
        row_done = True
        for ix in order:
            if should_abort is not None and should_abort():
                log.info("scan aborted at row %d", iy)
                aborted = True
                row_done = False
                break
            t0 = session.clock
            session.move_xy(float(xs[ix]), float(ys[iy]))
            flag = FLAG_FAILED
            for attempt in range(2):
                budget_used = (attempt + 1) * cfg.sweep.sweep_time
                if budget_used > cfg.timeout_per_pixel:
                    flag = FLAG_TIMEOUT
                    break
                seed = np.random.SeedSequence((scan_seed, ix, iy, attempt))
                counts = _pixel_counts(session, cfg, freqs, seed)
                try:
                    vals = _fit_pixel(cfg, freqs, counts, nv, cfg.sweep)
                except FitFailedError:
                    log.debug("pixel (%d, %d) attempt %d failed", ix, iy,
                              attempt)
                    continue
                bp, sig, fm, fp, c, x2 = vals
                f_minus[iy, ix], f_plus[iy, ix] = fm, fp
                contrast[iy, ix], chi2[iy, ix] = c, x2
                if c < QUENCH_FRACTION * nominal:
                    flag = FLAG_QUENCHED
                else:
                    b[iy, ix] = bp - bias_par
                    sigma_b[iy, ix] = sig
                    flag = FLAG_OK if attempt == 0 else FLAG_RETRIED
                break
            flags[iy, ix] = flag
            t_pixel[iy, ix] = session.clock - t0
            n_done += 1
            if progress is not None:
                progress(n_done, cfg.n_pixels)
        if aborted:
            for g in grids[:-1]:
                g[iy, :] = np.nan
            flags[iy, :] = FLAG_NOT_SCANNED
            break
        if row_done:
            rows_completed = iy + 1
            if on_row is not None:
                on_row(iy, {k: g[iy, :].copy() for k, g in zip(names, grids)})

    return FieldMap(
        b=b, sigma_b=sigma_b, f_minus=f_minus, f_plus=f_plus,
        contrast=contrast, chi2=chi2, t_pixel=t_pixel, flags=flags,
        config=cfg, temperature=session.fork.temperature,
        t_start=t_start, t_end=session.clock,
        rows_completed=rows_completed, aborted=aborted,
        metadata={
            "scan_seed": scan_seed,
            "bias_field": [float(v) for v in session.bias_field],
            "bias_parallel": bias_par,
            "window_hz": [float(freqs[0]), float(freqs[-1])],
            "extraction": cfg.extraction,
            "nv_height_m": session.nv_height(),
            "config_digest": session.config_digest,
        },
    )


def oracle_field_grid(session: Instrument, cfg: ScanConfig) -> np.ndarray:
    """Exact sample field along the NV axis on the scan grid (no bias).

    Evaluates the stray-field model at the NV height the scan runs at;
    reference for validating maps, not part of acquisition.
    """
    z = session.nv.depth + session.contact_offset + cfg.lift_height
    xs = cfg.x_coords
    row = stray_field(session.sample, xs, np.full_like(xs, z)) @ session.nv.axis
    return np.tile(row, (cfg.ny, 1))


# ---------------------------------------------------------------------------
# cross sections
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianPeak:
    amplitude: float
    amplitude_std: float
    center: float
    center_std: float
    sigma: float
    sigma_std: float

    @property
    def fwhm(self) -> float:
        return FWHM_FACTOR * self.sigma

    @property
    def fwhm_std(self) -> float:
        return FWHM_FACTOR * self.sigma_std


@dataclass(frozen=True)
class CrossSection:
    """Field profile along one grid line, with fitted Gaussian peaks."""

    positions: np.ndarray     # m, along the line (valid pixels only)
    b: np.ndarray             # T
    sigma_b: np.ndarray       # T
    axis: str                 # "x": varying x at fixed row; "y": column
    index: int
    line_coord: float         # m, the fixed coordinate
    peaks: tuple[GaussianPeak, ...]

    def __post_init__(self):
        for name in ("positions", "b", "sigma_b"):
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name), float))
        if not (self.positions.shape == self.b.shape == self.sigma_b.shape):
            raise ValueError("positions, b, sigma_b must have equal shape")
        if self.positions.size and np.any(np.diff(self.positions) <= 0):
            raise ValueError("positions must be strictly increasing")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["position_m", "B_T", "sigma_T"])
            for p, v, s in zip(self.positions, self.b, self.sigma_b):
                w.writerow([repr(float(p)), repr(float(v)), repr(float(s))])


def _detect_peaks(dev: np.ndarray, noise: float) -> list[int]:
    amp = float(np.max(np.abs(dev))) if dev.size else 0.0
    if amp < 6.0 * noise:
        return []
    thresh = max(3.0 * noise, 0.35 * amp)
    above = np.abs(dev) >= thresh
    peaks = []
    start = None
    for i, flag in enumerate(above):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            peaks.append(start + int(np.argmax(np.abs(dev[start:i]))))
            start = None
    if start is not None:
        peaks.append(start + int(np.argmax(np.abs(dev[start:]))))
    return peaks


def cross_section(fmap: FieldMap, axis: str = "x", index: int = 0,
                  peaks=None) -> CrossSection:
    """Extract one grid line and fit Gaussian peaks to its features.

    axis "x" takes row `index` (profile along x); axis "y" takes column
    `index`. Invalid pixels are dropped from the profile. Peaks are
    auto-detected as deviations from the line median, or taken from
    `peaks` (approximate positions in meters); each is fitted with a
    Gaussian on a window bounded by its neighbors. A featureless line
    yields an empty peak list.
    """
    if axis == "x":
        if not 0 <= index < fmap.config.ny:
            raise ValueError("row index out of range")
        pos_all = fmap.x_coords
        values = fmap.b[index, :]
        sigmas = fmap.sigma_b[index, :]
        valid = fmap.valid_mask[index, :]
        line_coord = float(fmap.y_coords[index])
    elif axis == "y":
        if not 0 <= index < fmap.config.nx:
            raise ValueError("column index out of range")
        pos_all = fmap.y_coords
        values = fmap.b[:, index]
        sigmas = fmap.sigma_b[:, index]
        valid = fmap.valid_mask[:, index]
        line_coord = float(fmap.x_coords[index])
    else:
        raise ValueError("axis must be 'x' or 'y'")

    pos = np.asarray(pos_all, float)[valid]
    y = values[valid]
    sy = sigmas[valid]
    if pos.size < 5:
        return CrossSection(pos, y, sy, axis, index, line_coord, ())

    med = float(np.median(y))
    dev = y - med
    noise = max(float(np.median(sy)), np.finfo(float).tiny)
    if peaks is None:
        idx = _detect_peaks(dev, noise)
    else:
        idx = sorted({int(np.argmin(np.abs(pos - float(p)))) for p in peaks})

    fitted = []
    for k, i in enumerate(idx):
        lo = 0 if k == 0 else (idx[k - 1] + i) // 2 + 1
        hi = len(pos) if k == len(idx) - 1 else (i + idx[k + 1]) // 2 + 1
        lo, hi = max(lo, i - 8), min(hi, i + 9)
        if hi - lo < 5:
            log.warning("peak at %.3g m skipped: window too small", pos[i])
            continue
        sign = 1.0 if dev[i] >= 0 else -1.0
        xw, yw, sw = pos[lo:hi], sign * y[lo:hi], sy[lo:hi]
        # windows are bounded by the neighboring peaks and can be narrower
        # than a heuristic guess needs, so seed the fit from the geometry
        init = np.array([abs(dev[i]), pos[i],
                         max((xw[-1] - xw[0]) / 4.0, np.finfo(float).tiny),
                         sign * med])
        try:
            res = fit("gaussian_peak", xw, yw, sigma_y=sw, init=init)
        except ValueError:
            log.warning("peak at %.3g m skipped: no usable fit", pos[i])
            continue
        if not res.converged:
            log.warning("peak at %.3g m skipped: fit did not converge", pos[i])
            continue
        span = xw[-1] - xw[0]
        if not (xw[0] <= res.params[1] <= xw[-1]) or res.params[2] > span:
            log.warning("peak at %.3g m skipped: fit left its window", pos[i])
            continue
        errs = res.std_errors
        fitted.append(GaussianPeak(
            amplitude=sign * float(res.params[0]),
            amplitude_std=float(errs[0]),
            center=float(res.params[1]),
            center_std=float(errs[1]),
            sigma=float(res.params[2]),
            sigma_std=float(errs[2]),
        ))
    fitted.sort(key=lambda p: p.center)
    return CrossSection(pos, y, sy, axis, index, line_coord, tuple(fitted))
