"""Instrument session: positions, bias field, seed streams, sim clock.

One Instrument instance is the single source of truth for the virtual
microscope's physical state.  Acquisition modules (calib, sensing,
scanengine) read and mutate it; the server wraps it in a state machine
and a command lane.

Distance convention (tip-sample distance d): 0 at the contact point,
negative = out of contact, positive = pressed into the surface.  The NV
height above the sample used for field evaluation is

    z_nv = nv.depth + contact_offset + max(0, -d)

so an approach (d ~ 0) followed by a 50 nm lift puts the NV at
50 + 5 + 10 = 65 nm for the default depth and contact offset.  A fully
retracted tip (d = None) sits ``far_distance`` away where the sample
field is negligible.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import config_hash
from .simcore import (
    NVParams,
    SampleModel,
    TipSampleInteraction,
    TuningForkParams,
    default_fork,
    interaction_response,
    odmr_rate,
    sample_counts,
    stray_field,
)

log = logging.getLogger(__name__)

CONTACT_OFFSET = 5e-9
FAR_DISTANCE = 1e-3  # retracted: sample effectively absent
MOVE_TIME = 5e-3     # simulated s per positioning move


class StateError(RuntimeError):
    """Operation not allowed in the session's current state."""


@dataclass
class Instrument:
    fork: TuningForkParams = field(default_factory=default_fork)
    nv: NVParams = field(default_factory=NVParams)
    sample: SampleModel = field(default_factory=SampleModel)
    interaction: TipSampleInteraction = field(default_factory=TipSampleInteraction)
    seed: int = 0
    contact_offset: float = CONTACT_OFFSET
    accelerated: bool = True
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = 0.0
        self.y = 0.0
        self.tip_distance: float | None = None  # None = fully retracted
        self.bias_field = np.zeros(3)
        self.lift_height: float | None = None
        self.calibration = None
        self.clock = 0.0
        self.fault: str | None = None
        self._seed_counter = 0

    def require_operable(self):
        """Raise StateError while a fault is latched (e.g. a safety trip)."""
        if self.fault is not None:
            raise StateError(f"session is faulted: {self.fault}")

    # -- provenance ---------------------------------------------------------

    @property
    def config_digest(self) -> str:
        return config_hash(self.config)

    # -- seed streams -------------------------------------------------------

    def next_seed(self):
        """Deterministic per-session seed stream (one draw per acquisition)."""
        s = np.random.SeedSequence((self.seed, self._seed_counter))
        self._seed_counter += 1
        return s

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.next_seed())

    # -- clock --------------------------------------------------------------

    def advance(self, duration: float):
        """Account simulated acquisition time; sleep only in real-time mode."""
        self.clock += duration
        if not self.accelerated:
            time.sleep(duration)

    # -- geometry -----------------------------------------------------------

    @property
    def approached(self) -> bool:
        return self.tip_distance is not None

    def nv_height(self) -> float:
        """NV height above the sample surface, m."""
        if self.tip_distance is None:
            return FAR_DISTANCE
        return self.nv.depth + self.contact_offset + max(0.0, -self.tip_distance)

    def move_xy(self, x: float, y: float):
        self.x = float(x)
        self.y = float(y)
        self.advance(MOVE_TIME)

    def set_tip_distance(self, d: float | None):
        self.tip_distance = None if d is None else float(d)
        if d is None:
            self.lift_height = None
        self.advance(MOVE_TIME)

    def retract(self):
        log.info("retracting tip to safe distance")
        self.set_tip_distance(None)

    def set_bias(self, b_field):
        b = np.asarray(b_field, dtype=float)
        if b.shape != (3,) or not np.all(np.isfinite(b)):
            raise ValueError("bias field must be a finite 3-vector")
        self.bias_field = b

    # -- physics at the current state ----------------------------------------

    def field_at_nv(self, x: float | None = None, y: float | None = None) -> np.ndarray:
        """Total field at the NV: bias plus sample stray field, T."""
        xq = self.x if x is None else x
        z = self.nv_height()
        b = stray_field(self.sample, np.array([xq]), np.array([z]))[0]
        return self.bias_field + b

    def frequency_shift(self) -> tuple[float, float, float]:
        """(delta_f, q_eff, amp_factor) of the fork at the current distance."""
        if self.tip_distance is None:
            return 0.0, self.fork.q_factor, 1.0
        return interaction_response(self.interaction, self.fork, self.tip_distance)

    def read_frequency_shift(self, t_avg: float = 10e-3) -> float:
        """One noisy PLL-style frequency-shift reading, Hz.

        Readout noise scales as the thermal-limited frequency noise
        1/sqrt(t); model detail is plumbing, not physics.
        """
        df, _, _ = self.frequency_shift()
        sigma = 0.05 * self.fork.linewidth / np.sqrt(t_avg / 1e-3)
        self.advance(t_avg)
        return df + float(self.rng().normal(0.0, sigma))

    def odmr_counts(self, freqs: np.ndarray, t_per_point: float, p_opt: float,
                    seed=None) -> np.ndarray:
        """Poisson photon counts for an MW sweep at the current position."""
        b = self.field_at_nv()
        rates = odmr_rate(self.nv, freqs, b, p_opt)
        use = self.next_seed() if seed is None else seed
        counts = sample_counts(rates, t_bin=t_per_point, seed=use)
        self.advance(t_per_point * len(freqs))
        return counts
