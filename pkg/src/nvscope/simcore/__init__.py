"""Deterministic, seeded physics simulation of the virtual instrument."""

from .fork import (
    driven_amplitude,
    interaction_response,
    sample_psd_measurement,
    sweep_resonance,
    thermal_displacement_psd,
    thermal_psd,
)
from .nvoptics import (
    effective_contrast,
    field_projections,
    odmr_rate,
    sample_counts,
    saturation_rate,
)
from .params import (
    NVParams,
    SampleModel,
    TipSampleInteraction,
    TuningForkParams,
    default_fork,
    models_from_config,
)
from .strayfield import magnetization_profile, stray_field

__all__ = [
    "NVParams",
    "SampleModel",
    "TipSampleInteraction",
    "TuningForkParams",
    "default_fork",
    "driven_amplitude",
    "effective_contrast",
    "field_projections",
    "interaction_response",
    "magnetization_profile",
    "models_from_config",
    "odmr_rate",
    "sample_counts",
    "sample_psd_measurement",
    "saturation_rate",
    "stray_field",
    "sweep_resonance",
    "thermal_displacement_psd",
    "thermal_psd",
]
