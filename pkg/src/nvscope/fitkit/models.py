"""Model functions for the fitting engine.

Every model declares its parameter names and ordering, an evaluation
function, an analytic Jacobian with respect to the *external* parameters,
a per-parameter bound transform ("lin" unbounded, "log" positive,
"logit" in (0, 1)) and a heuristic initial-guess routine.

Registered models:

    psd_lorentzian   S(f) = a / ((f^2 - f0^2)^2 + (f f0 / q)^2) + c
                     params (a, f0, q, c); doubles as the driven resonance
                     response when fitted to amplitude-squared data
    saturation       r(p) = r_inf p / (p + p_sat) + a p + b
                     params (r_inf, p_sat, a, b)
    odmr_double_dip  r(f) = base (1 - (c/2) L(f;f_minus,w) - (c/2) L(f;f_plus,w))
                     params (base, f_minus, f_plus, contrast, width)
    odmr_single_dip  r(f) = base (1 - c L(f;f0,w)); params (base, f0, contrast, width)
    gaussian_peak    y(x) = amp exp(-(x-mu)^2 / (2 sigma^2)) + offset
                     params (amp, mu, sigma, offset)

L is the unit-peak Lorentzian h^2/((f-f0)^2 + h^2), h = w/2 (w = FWHM).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class NoFeatureError(ValueError):
    """Data has no usable feature (flat within noise)."""


@dataclass(frozen=True)
class Model:
    name: str
    param_names: tuple[str, ...]
    transforms: tuple[str, ...]          # "lin" | "log" | "logit"
    scales_with_y: tuple[bool, ...]      # True for amplitude-like params
    fn: Callable
    jac: Callable
    guess: Callable

    @property
    def n_params(self) -> int:
        return len(self.param_names)


def _noise_scale(y: np.ndarray) -> float:
    # robust point-to-point noise estimate from first differences
    d = np.diff(y)
    return float(np.median(np.abs(d)) / 0.6744897501960817 / np.sqrt(2.0))


def _require_feature(y: np.ndarray, sigma_y=None):
    rng = float(np.max(y) - np.min(y))
    noise = _noise_scale(y)
    if rng <= 0.0 or rng < 3.0 * noise:
        raise NoFeatureError("data is flat within noise; nothing to fit")
    # one-sided excursion from the median: catches statistically flat data
    # whose raw range grows with sample count, for peaks and dips alike.
    # Smoothing over 3 bins keeps multi-bin features (noise drops by
    # sqrt(3), the feature barely) without admitting single-point spikes.
    if y.size >= 6:
        ys = np.convolve(y, np.full(3, 1.0 / 3.0), mode="valid")
        noise_s = noise / np.sqrt(3.0)
    else:
        ys, noise_s = y, noise
    med = float(np.median(ys))
    feature = max(float(np.max(ys)) - med, med - float(np.min(ys)))
    if feature >= 6.0 * noise_s:
        return
    # A feature spread over many points can be individually sub-threshold
    # yet jointly unambiguous. With trusted per-point sigmas, the excess
    # of chi-squared against a flat line aggregates that evidence with a
    # calibrated null (chi2 ~ dof +- sqrt(2 dof)).
    if sigma_y is not None:
        sig = np.asarray(sigma_y, float)
        dof = y.size - 1
        chi2 = float(np.sum(((y - np.median(y)) / sig) ** 2))
        if (chi2 - dof) / np.sqrt(2.0 * dof) >= 6.0:
            return
    raise NoFeatureError("data is flat within noise; nothing to fit")


def _edge_baseline(y: np.ndarray) -> float:
    q = max(len(y) // 4, 1)
    return float(np.median(np.concatenate([y[:q], y[-q:]])))


def _halfmax_width(x, y, i_peak, level) -> float:
    """Full width of the feature around i_peak at the given level."""
    n = len(x)
    above = y >= level if y[i_peak] >= level else y <= level
    lo = i_peak
    while lo > 0 and above[lo - 1]:
        lo -= 1
    hi = i_peak
    while hi < n - 1 and above[hi + 1]:
        hi += 1
    width = abs(x[hi] - x[lo])
    if width <= 0:
        width = abs(x[min(i_peak + 1, n - 1)] - x[max(i_peak - 1, 0)])
    return float(width) if width > 0 else float(abs(x[-1] - x[0]) / len(x))


# --- psd_lorentzian ---------------------------------------------------------

def _psd_fn(f, p):
    a, f0, q, c = p
    denom = (f * f - f0 * f0) ** 2 + (f * f0 / q) ** 2
    return a / denom + c


def _psd_jac(f, p):
    a, f0, q, c = p
    u = f * f - f0 * f0
    v = f * f0 / q
    denom = u * u + v * v
    inv = 1.0 / denom
    inv2 = inv * inv
    d_f0 = -4.0 * f0 * u + 2.0 * f * f * f0 / (q * q)
    d_q = -2.0 * f * f * f0 * f0 / q**3
    out = np.empty(f.shape + (4,))
    out[..., 0] = inv
    out[..., 1] = -a * inv2 * d_f0
    out[..., 2] = -a * inv2 * d_q
    out[..., 3] = 1.0
    return out


def _psd_guess(f, y, sigma_y=None):
    _require_feature(y, sigma_y)
    c = max(_edge_baseline(y), float(np.min(y)) * 0.5 + np.finfo(float).tiny)
    i = int(np.argmax(y))
    f0 = float(f[i])
    width = _halfmax_width(f, y, i, c + (y[i] - c) / 2.0)
    q = max(f0 / width, 2.0)
    a = max((y[i] - c), np.finfo(float).tiny) * (f0 * width) ** 2
    return np.array([a, f0, q, max(c, 1e-300)])


# --- saturation -------------------------------------------------------------

def _sat_fn(p_opt, p):
    r_inf, p_sat, a, b = p
    return r_inf * p_opt / (p_opt + p_sat) + a * p_opt + b


def _sat_jac(p_opt, p):
    r_inf, p_sat, a, b = p
    s = p_opt + p_sat
    out = np.empty(p_opt.shape + (4,))
    out[..., 0] = p_opt / s
    out[..., 1] = -r_inf * p_opt / (s * s)
    out[..., 2] = p_opt
    out[..., 3] = 1.0
    return out


def _sat_guess(p_opt, y, sigma_y=None):
    _require_feature(y, sigma_y)
    order = np.argsort(p_opt)
    ps, ys = p_opt[order], y[order]
    b = max(float(ys[0]), 1e-300)
    p_sat = float(np.median(ps[ps > 0])) if np.any(ps > 0) else 1.0
    # slope of the top decade approximates the linear background
    k = max(len(ps) // 4, 2)
    a = float((ys[-1] - ys[-k]) / max(ps[-1] - ps[-k], 1e-300))
    a = max(a, 0.0)
    r_inf = max(float(ys[-1] - b - a * ps[-1]), 1e-300)
    return np.array([r_inf, p_sat, a, b])


# --- ODMR dips --------------------------------------------------------------

def _lor(f, f0, h):
    return h * h / ((f - f0) ** 2 + h * h)


def _dd_fn(f, p):
    base, f_m, f_p, c, w = p
    h = w / 2.0
    return base * (1.0 - 0.5 * c * (_lor(f, f_m, h) + _lor(f, f_p, h)))


def _dd_jac(f, p):
    base, f_m, f_p, c, w = p
    h = w / 2.0
    sm = (f - f_m) ** 2
    sp = (f - f_p) ** 2
    dm = sm + h * h
    dp = sp + h * h
    lm = h * h / dm
    lp = h * h / dp
    out = np.empty(f.shape + (5,))
    out[..., 0] = 1.0 - 0.5 * c * (lm + lp)
    out[..., 1] = -0.5 * base * c * (2.0 * h * h * (f - f_m) / (dm * dm))
    out[..., 2] = -0.5 * base * c * (2.0 * h * h * (f - f_p) / (dp * dp))
    out[..., 3] = -0.5 * base * (lm + lp)
    # dL/dh = 2 h s / (s + h^2)^2, dh/dw = 1/2
    out[..., 4] = -0.25 * base * c * (2.0 * h * sm / (dm * dm) + 2.0 * h * sp / (dp * dp))
    return out


def _dip_candidates(f, y, base):
    """Indices of up to two dip minima (raw grid), deepest first.

    Mask-and-rescan on lightly smoothed data: take the deepest point,
    exclude 1.5 half-max widths around it, and accept the deepest
    remaining point as a second dip only if it clears both 30% of the
    main depth and the smoothed noise level. Threshold-run grouping
    fails when two dips a couple of linewidths apart leave a saddle that
    never recovers to the baseline; unsmoothed rescans latch onto the
    main dip's own noisy shoulder.
    """
    y = np.asarray(y, float)
    n = len(y)
    if n >= 9:
        ys = np.convolve(y, np.full(3, 1.0 / 3.0), mode="valid")
        off = 1
        noise_s = _noise_scale(y) / np.sqrt(3.0)
    else:
        ys, off, noise_s = y, 0, _noise_scale(y)
    fs = np.asarray(f, float)[off:off + len(ys)]
    depth = base - ys
    j0 = int(np.argmax(depth))
    w0 = _halfmax_width(fs, ys, j0, base - 0.5 * depth[j0])
    df = abs(float(f[-1]) - float(f[0])) / max(n - 1, 1)
    excl = max(1.5 * w0, 5.0 * df)
    outside = np.abs(fs - fs[j0]) > excl
    if np.any(outside):
        masked = np.where(outside, depth, -np.inf)
        j1 = int(np.argmax(masked))
        if depth[j1] >= max(0.3 * depth[j0], 4.0 * noise_s):
            return sorted((j0 + off, j1 + off), key=lambda i: y[i])
    return [j0 + off]


def _dd_guess(f, y, sigma_y=None):
    _require_feature(y, sigma_y)
    base = float(np.median(np.sort(y)[-max(len(y) // 4, 1):]))
    mins = _dip_candidates(f, y, base)
    i0 = mins[0]
    width = _halfmax_width(f, y, i0, base - 0.5 * (base - y[i0]))
    if len(mins) >= 2:
        fa, fb = sorted((float(f[mins[0]]), float(f[mins[1]])))
        c = 2.0 * (1.0 - float(y[i0]) / base)
    else:
        # unresolved: seed a small symmetric splitting about the single dip
        fa = float(f[i0]) - width / 4.0
        fb = float(f[i0]) + width / 4.0
        c = 1.0 - float(y[i0]) / base
    c = float(np.clip(c, 1e-3, 0.95))
    return np.array([base, fa, fb, c, max(width, np.finfo(float).tiny)])


def _sd_fn(f, p):
    base, f0, c, w = p
    return base * (1.0 - c * _lor(f, f0, w / 2.0))


def _sd_jac(f, p):
    base, f0, c, w = p
    h = w / 2.0
    s = (f - f0) ** 2
    d = s + h * h
    l0 = h * h / d
    out = np.empty(f.shape + (4,))
    out[..., 0] = 1.0 - c * l0
    out[..., 1] = -base * c * (2.0 * h * h * (f - f0) / (d * d))
    out[..., 2] = -base * l0
    out[..., 3] = -0.5 * base * c * (2.0 * h * s / (d * d))
    return out


def _sd_guess(f, y, sigma_y=None):
    _require_feature(y, sigma_y)
    base = float(np.median(np.sort(y)[-max(len(y) // 4, 1):]))
    i0 = int(np.argmin(y))
    width = _halfmax_width(f, y, i0, base - 0.5 * (base - y[i0]))
    c = float(np.clip(1.0 - float(y[i0]) / base, 1e-3, 0.95))
    return np.array([base, float(f[i0]), c, max(width, np.finfo(float).tiny)])


# --- gaussian_peak ----------------------------------------------------------

def _gauss_fn(x, p):
    amp, mu, sigma, off = p
    return amp * np.exp(-0.5 * ((x - mu) / sigma) ** 2) + off


def _gauss_jac(x, p):
    amp, mu, sigma, off = p
    t = (x - mu) / sigma
    e = np.exp(-0.5 * t * t)
    out = np.empty(x.shape + (4,))
    out[..., 0] = e
    out[..., 1] = amp * e * t / sigma
    out[..., 2] = amp * e * t * t / sigma
    out[..., 3] = 1.0
    return out


def _gauss_guess(x, y, sigma_y=None):
    _require_feature(y, sigma_y)
    off = _edge_baseline(y)
    dev = y - off
    i = int(np.argmax(np.abs(dev)))
    amp = float(dev[i])
    width = _halfmax_width(x, y, i, off + amp / 2.0)
    sigma = max(width / 2.3548200450309493, np.finfo(float).tiny)
    return np.array([amp, float(x[i]), sigma, off])


MODELS: dict[str, Model] = {
    m.name: m
    for m in (
        Model(
            "psd_lorentzian",
            ("a", "f0", "q", "c"),
            ("log", "log", "log", "log"),
            (True, False, False, True),
            _psd_fn, _psd_jac, _psd_guess,
        ),
        Model(
            "saturation",
            ("r_inf", "p_sat", "a", "b"),
            ("log", "log", "lin", "lin"),
            (True, False, True, True),
            _sat_fn, _sat_jac, _sat_guess,
        ),
        Model(
            "odmr_double_dip",
            ("base", "f_minus", "f_plus", "contrast", "width"),
            ("log", "lin", "lin", "logit", "log"),
            (True, False, False, False, False),
            _dd_fn, _dd_jac, _dd_guess,
        ),
        Model(
            "odmr_single_dip",
            ("base", "f0", "contrast", "width"),
            ("log", "lin", "logit", "log"),
            (True, False, False, False),
            _sd_fn, _sd_jac, _sd_guess,
        ),
        Model(
            "gaussian_peak",
            ("amp", "mu", "sigma", "offset"),
            ("lin", "lin", "log", "lin"),
            (True, False, False, True),
            _gauss_fn, _gauss_jac, _gauss_guess,
        ),
    )
}


def get_model(model_id: str) -> Model:
    try:
        return MODELS[model_id]
    except KeyError:
        raise ValueError(f"unknown model {model_id!r}; have {sorted(MODELS)}") from None


def initial_guess(model_id: str, x, y, sigma_y=None) -> np.ndarray:
    """Heuristic starting parameters; finite and inside declared bounds.

    Samples are sorted by x first, so the guess is order-invariant.
    Trusted per-point sigmas, when given, let the flat-data gate accept
    spread-out features whose evidence is aggregate rather than
    point-wise (see _require_feature).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D arrays of equal length")
    if len(x) < 8:
        raise ValueError("need at least 8 samples for an initial guess")
    order = np.argsort(x, kind="stable")
    sig = None
    if sigma_y is not None:
        sig = np.asarray(sigma_y, dtype=float)
        if sig.shape != y.shape:
            raise ValueError("sigma_y must match y")
        sig = sig[order]
    guess = get_model(model_id).guess(x[order], y[order], sig)
    if not np.all(np.isfinite(guess)):
        raise NoFeatureError("could not form a finite initial guess")
    return guess
