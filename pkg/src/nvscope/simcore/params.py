"""Model parameter types for the simulated instrument.

All quantities SI. Each dataclass validates its physical invariants on
construction; a violated invariant raises ValueError (warnings only where
the contract says warn).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from ..constants import D_ZFS, GAMMA_NV


def _require(cond: bool, msg: str):
    if not cond:
        raise ValueError(msg)


@dataclass(frozen=True)
class TuningForkParams:
    """Mechanical/electrical model of the shear-mode resonator.

    f_res      resonance frequency, Hz
    q_factor   quality factor
    m_eff      effective modal mass, kg
    k_spring   spring constant, N/m
    alpha      displacement-to-voltage transduction, V/m
    s_en       electronic noise floor of the readout, V^2/Hz
    temperature bath temperature, K
    """

    f_res: float
    q_factor: float
    m_eff: float
    k_spring: float
    alpha: float
    s_en: float
    temperature: float

    def __post_init__(self):
        _require(self.f_res > 0, "f_res must be > 0")
        _require(self.q_factor > 1, "q_factor must be > 1")
        _require(self.m_eff > 0, "m_eff must be > 0")
        _require(self.k_spring > 0, "k_spring must be > 0")
        _require(self.alpha > 0, "alpha must be > 0")
        _require(self.s_en >= 0, "s_en must be >= 0")
        _require(self.temperature > 0, "temperature must be > 0")
        k_consistent = self.m_eff * (2 * math.pi * self.f_res) ** 2
        if abs(self.k_spring - k_consistent) / self.k_spring > 0.05:
            warnings.warn(
                f"k_spring={self.k_spring:.3g} N/m differs from "
                f"m_eff*(2*pi*f_res)^2={k_consistent:.3g} N/m by more than 5%",
                stacklevel=2,
            )

    @property
    def linewidth(self) -> float:
        """Resonance linewidth f_res/Q, Hz."""
        return self.f_res / self.q_factor


@dataclass(frozen=True)
class NVParams:
    """NV photophysics and spin parameters.

    d_zfs      zero-field splitting, Hz
    gamma      gyromagnetic ratio, Hz/T
    contrast0  zero-field ODMR contrast (both dips combined), 0..1
    linewidth  ODMR dip FWHM, Hz
    r_inf      saturated fluorescence rate, counts/s
    p_sat      optical saturation power, W
    bg_slope   linear background, counts/s/W
    dark_rate  dark counts, counts/s
    nv_axis    NV symmetry axis, unit vector
    depth      NV-to-facet distance, m
    b_quench   transverse-field contrast quench scale, T
    """

    d_zfs: float = D_ZFS
    gamma: float = GAMMA_NV
    contrast0: float = 0.3
    linewidth: float = 8e6
    r_inf: float = 2591e3
    p_sat: float = 100e-6
    bg_slope: float = 2e8
    dark_rate: float = 300.0
    nv_axis: tuple[float, float, float] = (
        0.816496580927726, 0.0, 0.5773502691896258)
    depth: float = 10e-9
    b_quench: float = 5e-3

    def __post_init__(self):
        _require(0 < self.contrast0 < 1, "contrast0 must be in (0, 1)")
        _require(self.r_inf > 0, "r_inf must be > 0")
        _require(self.p_sat > 0, "p_sat must be > 0")
        _require(self.linewidth > 0, "linewidth must be > 0")
        _require(self.depth >= 0, "depth must be >= 0")
        _require(self.b_quench > 0, "b_quench must be > 0")
        axis = np.asarray(self.nv_axis, dtype=float)
        _require(axis.shape == (3,), "nv_axis must be a 3-vector")
        _require(abs(np.linalg.norm(axis) - 1.0) <= 1e-12,
                 "nv_axis must be a unit vector (|norm - 1| <= 1e-12)")
        object.__setattr__(self, "nv_axis", tuple(float(c) for c in axis))

    @property
    def axis(self) -> np.ndarray:
        return np.asarray(self.nv_axis, dtype=float)


@dataclass(frozen=True)
class SampleModel:
    """Out-of-plane stripe-domain sample producing an analytic stray field.

    stripe_period  full up+down domain period, m
    moment_areal   areal moment density M_s*t of a domain, A
    wall_width     Gaussian domain-wall smoothing width, m
    pattern_phase  x offset of the pattern, m
    easy_axis_oop  out-of-plane easy axis flag (only True is modeled)
    """

    stripe_period: float = 230e-9
    moment_areal: float = 2.5e-4
    wall_width: float = 20e-9
    pattern_phase: float = 0.0
    easy_axis_oop: bool = True

    def __post_init__(self):
        _require(self.stripe_period > 0, "stripe_period must be > 0")
        _require(self.wall_width > 0, "wall_width must be > 0")
        _require(self.wall_width < self.stripe_period / 2,
                 "wall_width must be < stripe_period/2")
        _require(self.easy_axis_oop, "only out-of-plane easy axis is modeled")


@dataclass(frozen=True)
class TipSampleInteraction:
    """Empirical tip-sample interaction knobs for the approach model.

    df_max             frequency shift at the contact point, Hz
    decay_len          out-of-contact exponential decay length, m
    damping_scale      dimensionless extra damping at contact
    contact_stiffening frequency shift slope past contact, Hz/m
    """

    df_max: float = 30.0
    decay_len: float = 0.8e-9
    damping_scale: float = 1.5
    contact_stiffening: float = 2e9

    def __post_init__(self):
        _require(self.decay_len > 0, "decay_len must be > 0")
        _require(math.isfinite(self.df_max), "df_max must be finite")
        _require(self.damping_scale >= 0, "damping_scale must be >= 0")


def default_fork(temperature: float = 300.0) -> TuningForkParams:
    """Self-consistent default fork: k = m_eff*(2*pi*f_res)^2 exactly."""
    f_res = 32.3e3
    k_spring = 10.0
    return TuningForkParams(
        f_res=f_res,
        q_factor=25e3,
        m_eff=k_spring / (2 * math.pi * f_res) ** 2,
        k_spring=k_spring,
        alpha=3e5,
        s_en=1e-13,
        temperature=temperature,
    )


_SECTION_TYPES = {
    "fork": TuningForkParams,
    "nv": NVParams,
    "sample": SampleModel,
    "interaction": TipSampleInteraction,
}

_FIELD_ALIASES = {"nv_axis": lambda v: tuple(np.asarray(v, float) / np.linalg.norm(v))}


def models_from_config(config: dict):
    """Build (fork, nv, sample, interaction) from a parsed config dict.

    Missing sections fall back to defaults; unknown keys raise ValueError.
    """
    out = []
    for section, cls in _SECTION_TYPES.items():
        raw = dict(config.get(section, {}))
        fields = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(raw) - fields
        if unknown:
            raise ValueError(f"unknown {section} config keys: {sorted(unknown)}")
        for key, conv in _FIELD_ALIASES.items():
            if key in raw:
                raw[key] = conv(raw[key])
        if section == "fork":
            base = default_fork()
            merged = {f: getattr(base, f) for f in fields}
            merged.update(raw)
            out.append(cls(**merged))
        else:
            out.append(cls(**raw))
    return tuple(out)
