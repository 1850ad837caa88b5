"""Parameter dataclass validation and config construction."""

import math

import numpy as np
import pytest

from nvscope.constants import GAMMA_NV
from nvscope.simcore import (
    NVParams,
    SampleModel,
    TipSampleInteraction,
    TuningForkParams,
    default_fork,
    models_from_config,
)


def test_default_fork_consistency():
    fork = default_fork()
    assert fork.f_res == pytest.approx(32.3e3)
    assert fork.k_spring == pytest.approx(10.0)
    # m_eff chosen so k = m (2 pi f0)^2 exactly
    assert fork.m_eff == pytest.approx(
        fork.k_spring / (2 * math.pi * fork.f_res) ** 2, rel=1e-12
    )
    assert fork.linewidth == pytest.approx(fork.f_res / fork.q_factor, rel=1e-12)


def test_fork_rejects_nonpositive():
    with pytest.raises(ValueError):
        TuningForkParams(
            f_res=-1.0, q_factor=1e4, m_eff=1e-10, k_spring=10.0,
            alpha=1e5, s_en=1e-13, temperature=300.0,
        )
    with pytest.raises(ValueError):
        TuningForkParams(
            f_res=32e3, q_factor=0.0, m_eff=1e-10, k_spring=10.0,
            alpha=1e5, s_en=1e-13, temperature=300.0,
        )


def test_fork_warns_on_inconsistent_spring(recwarn):
    TuningForkParams(
        f_res=32.3e3, q_factor=25e3, m_eff=2.4279e-10, k_spring=20.0,
        alpha=3e5, s_en=1e-13, temperature=300.0,
    )
    assert any("k_spring" in str(w.message) for w in recwarn.list)


def test_nv_axis_must_be_unit():
    with pytest.raises(ValueError):
        NVParams(nv_axis=(1.0, 1.0, 0.0))
    nv = NVParams()
    assert np.linalg.norm(nv.axis) == pytest.approx(1.0, abs=1e-12)
    assert nv.gamma == pytest.approx(GAMMA_NV)
    assert nv.gamma == pytest.approx(28.025e9, rel=1e-4)  # GHz/T scale


def test_sample_and_interaction_validation():
    with pytest.raises(ValueError):
        SampleModel(stripe_period=0.0)
    with pytest.raises(ValueError):
        TipSampleInteraction(decay_len=-1e-9)


def test_models_from_config_overrides():
    cfg = {
        "fork": {"q_factor": 12000, "temperature": 77.0},
        "nv": {"contrast0": 0.25},
        "sample": {"stripe_period": 200e-9},
        "interaction": {"df_max": 12.0},
    }
    fork, nv, sample, inter = models_from_config(cfg)
    assert fork.q_factor == 12000
    assert fork.temperature == 77.0
    assert fork.f_res == pytest.approx(32.3e3)  # untouched default
    assert nv.contrast0 == 0.25
    assert sample.stripe_period == pytest.approx(200e-9)
    assert inter.df_max == 12.0


def test_models_from_config_rejects_unknown_key():
    with pytest.raises(ValueError):
        models_from_config({"fork": {"bogus": 1}})


def test_models_from_config_empty_gives_defaults():
    fork, nv, sample, inter = models_from_config({})
    assert fork == default_fork()
    assert nv == NVParams()
    assert sample == SampleModel()
    assert inter == TipSampleInteraction()
