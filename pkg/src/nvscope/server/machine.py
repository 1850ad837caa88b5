"""Session state machine and verb table.

Pure data and functions only — no I/O, no instrument — so the machine
can be exhaustively fuzzed and the wire schema generated from one
source of truth.

Phases form a forward path idle → calibrated → approached → scanning
(scans return to approached), with two escape edges from any phase:
safe_retracting → idle (make-safe) and fault (latched error).  Every
verb declares the phases it is legal in; everything else is rejected
with a stable error code before touching the instrument.
"""

from __future__ import annotations

from dataclasses import dataclass, field

IDLE = "idle"
CALIBRATED = "calibrated"
APPROACHED = "approached"
SCANNING = "scanning"
SAFE_RETRACTING = "safe_retracting"
FAULT = "fault"
PHASES = (IDLE, CALIBRATED, APPROACHED, SCANNING, SAFE_RETRACTING, FAULT)


class MachineError(RuntimeError):
    """An undefined transition was requested (a programming error)."""


# phase-changing events emitted by verb handlers and job completions
EVENTS = ("calibrated", "approached", "scan_started", "scan_finished",
          "retracting", "retracted", "fault")

TRANSITIONS: dict[tuple[str, str], str] = {
    (IDLE, "calibrated"): CALIBRATED,
    (CALIBRATED, "calibrated"): CALIBRATED,      # recalibration
    (CALIBRATED, "approached"): APPROACHED,
    (APPROACHED, "approached"): APPROACHED,      # re-approach / deepen
    (APPROACHED, "scan_started"): SCANNING,
    (SCANNING, "scan_finished"): APPROACHED,
    (SAFE_RETRACTING, "retracted"): IDLE,
}
for _phase in PHASES:
    TRANSITIONS[(_phase, "retracting")] = SAFE_RETRACTING
    TRANSITIONS[(_phase, "fault")] = FAULT


def apply(phase: str, event: str) -> str:
    """Next phase for an internal event; undefined pairs raise."""
    try:
        return TRANSITIONS[(phase, event)]
    except KeyError:
        raise MachineError(f"no transition for event {event!r} in phase "
                           f"{phase!r}") from None


# ---------------------------------------------------------------------------
# verb table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Param:
    type: str                    # number | integer | boolean | string |
    #                              number[2] | number[3] | number[]
    required: bool = False
    default: object = None
    nullable: bool = False       # explicit null is a meaningful value
    unit: str = ""
    choices: tuple = ()
    desc: str = ""


@dataclass(frozen=True)
class Verb:
    name: str
    mutating: bool               # requires the controller token
    job: bool                    # runs as a cancellable background job
    phases: tuple | None         # allowed phases; None = any
    params: dict = field(default_factory=dict)
    result: str = ""


def _n(**kw) -> Param:
    return Param("number", **kw)


VERBS: dict[str, Verb] = {v.name: v for v in (
    Verb("get_state", mutating=False, job=False, phases=None,
         result="full session state snapshot plus this connection's id "
                "and controller status"),
    Verb("take_control", mutating=False, job=False, phases=None,
         result="controller: true; fails while another connection holds "
                "the token"),
    Verb("release_control", mutating=False, job=False, phases=None,
         result="controller: false"),
    Verb("set_bias_field", mutating=True, job=False,
         phases=(IDLE, CALIBRATED, APPROACHED),
         params={"b": Param("number[3]", required=True, unit="T",
                            desc="bias field vector")},
         result="updated state snapshot"),
    Verb("move_to", mutating=True, job=False,
         phases=(IDLE, CALIBRATED, APPROACHED),
         params={"x": _n(required=True, unit="m"),
                 "y": _n(required=True, unit="m")},
         result="updated state snapshot"),
    Verb("calibrate_brownian", mutating=True, job=True,
         phases=(IDLE, CALIBRATED),
         params={"n_avg": Param("integer", default=400),
                 "span": _n(default=40.0, unit="Hz",
                            desc="PSD half-span around resonance"),
                 "n_bins": Param("integer", default=800)},
         result="job id; completion carries the calibration envelope id "
                "and fitted alpha, f_res, q with standard errors"),
    Verb("approach_curve", mutating=True, job=True, phases=(CALIBRATED,),
         params={"start": _n(default=-6e-9, unit="m",
                             desc="far tip-sample distance (negative = "
                                  "out of contact)"),
                 "stop": _n(default=0.3e-9, unit="m"),
                 "n": Param("integer", default=64),
                 "n_avg": Param("integer", default=16),
                 "setpoint": _n(nullable=True, unit="Hz",
                                desc="when set, include PLL suggestion "
                                     "for this frequency-shift setpoint")},
         result="job id; completion carries the approach_curve envelope "
                "id; the tip is retracted afterwards"),
    Verb("approach", mutating=True, job=True,
         phases=(CALIBRATED, APPROACHED),
         params={"setpoint": _n(required=True, unit="Hz"),
                 "step": _n(default=0.2e-9, unit="m"),
                 "t_avg": _n(default=20e-3, unit="s")},
         result="job id; completion carries tip_distance_m, shift_hz, "
                "n_steps"),
    Verb("lift", mutating=True, job=False, phases=(APPROACHED,),
         params={"height": _n(required=True, unit="m",
                              desc="standoff above the contact point")},
         result="height_m and nv_height_m after the move"),
    Verb("odmr_sweep", mutating=True, job=True,
         phases=(IDLE, CALIBRATED, APPROACHED),
         params={"f_start": _n(required=True, unit="Hz"),
                 "f_stop": _n(required=True, unit="Hz"),
                 "n_points": Param("integer", default=96),
                 "t_per_point": _n(default=6e-3, unit="s"),
                 "p_opt": _n(default=13e-6, unit="W")},
         result="job id; points stream on sweep_live; completion carries "
                "the spectrum envelope id and the dip fit when it "
                "converged"),
    Verb("measure_saturation", mutating=True, job=True,
         phases=(IDLE, CALIBRATED, APPROACHED),
         params={"p_max": _n(default=500e-6, unit="W"),
                 "n": Param("integer", default=24),
                 "t_per_point": _n(default=0.05, unit="s")},
         result="job id; completion carries the report envelope id and "
                "fitted r_inf, p_sat with standard errors"),
    Verb("sensitivity_run", mutating=True, job=True,
         phases=(IDLE, CALIBRATED),
         params={"n": Param("integer", default=500),
                 "t": _n(default=1.0, unit="s"),
                 "bin": _n(default=0.56e-6, unit="T",
                           desc="histogram bin width")},
         result="job id; completion carries the report envelope id, "
                "sigma_formula and sigma_empirical"),
    Verb("start_scan", mutating=True, job=True, phases=(APPROACHED,),
         params={"extent": Param("number[2]", required=True, unit="m"),
                 "pixel_pitch": _n(required=True, unit="m"),
                 "origin": Param("number[2]", default=(0.0, 0.0), unit="m"),
                 "lift_height": _n(default=50e-9, unit="m"),
                 "noiseless": Param("boolean", default=False,
                                    desc="record expected counts instead "
                                         "of Poisson draws"),
                 "n_points": Param("integer", default=96),
                 "t_per_point": _n(default=6e-3, unit="s"),
                 "p_opt": _n(default=13e-6, unit="W"),
                 "stray_span": _n(default=2e-3, unit="T"),
                 "bias_parallel": _n(default=2e-3, nullable=True, unit="T",
                                     desc="bias applied along the NV axis "
                                          "at scan start; null = keep the "
                                          "current bias"),
                 "extraction": Param("string", default="double",
                                     choices=("double", "single")),
                 "serpentine": Param("boolean", default=True),
                 "timeout_per_pixel": _n(default=2.0, unit="s")},
         result="job id plus grid geometry (nx, ny, origin, pitch) and "
                "the simulated duration estimate; rows stream on "
                "scan_progress; completion carries the field_map "
                "envelope id"),
    Verb("abort", mutating=True, job=False, phases=None,
         result="phase after the abort; preempts the active job at the "
                "next pixel/point boundary, or safe-retracts to idle "
                "when no job is running"),
    Verb("subscribe", mutating=False, job=False, phases=None,
         params={"channel": Param("string", required=True),
                 "resume_from": Param("integer", nullable=True,
                                      desc="replay retained events with "
                                           "seq greater than this before "
                                           "going live")},
         result="channel, next_seq and the number of replayed events"),
    Verb("list_data", mutating=False, job=False, phases=None,
         params={"kind": Param("string", nullable=True)},
         result="items: [{id, kind, created_s, seed, config_hash}]"),
    Verb("load_data", mutating=False, job=False, phases=None,
         params={"id": Param("string", required=True),
                 "kind": Param("string", nullable=True)},
         result="the stored envelope as canonical JSON (arrays inline "
                "base64)"),
    Verb("cross_section", mutating=False, job=False, phases=None,
         params={"map_id": Param("string", required=True),
                 "axis": Param("string", default="x", choices=("x", "y")),
                 "index": Param("integer", required=True),
                 "peaks": Param("number[]", nullable=True, unit="m",
                                desc="fit peaks at these positions instead "
                                     "of auto-detecting")},
         result="profile (positions, b, sigma_b) and fitted peaks, plus "
                "the persisted report envelope id"),
)}

# make-safe is allowed from these phases even with no job to preempt
_ABORT_IDLE_PHASES = (CALIBRATED, APPROACHED, FAULT)


def verb_error(verb: str, phase: str, *, has_job: bool, is_controller: bool,
               has_calibration: bool) -> tuple[str, str] | None:
    """(code, message) when the verb is not allowed right now, else None."""
    spec = VERBS[verb]
    if spec.mutating and not is_controller:
        return ("not-controller",
                f"{verb} requires the controller token (take_control first)")
    if verb == "abort":
        if has_job or phase in _ABORT_IDLE_PHASES:
            return None
        return ("illegal-state", f"nothing to abort in phase {phase}")
    if has_job and (spec.mutating or spec.job):
        return ("busy", f"a job is already running; {verb} must wait or "
                        "abort it")
    if spec.phases is not None and phase not in spec.phases:
        return ("illegal-state",
                f"{verb} is not allowed in phase {phase} (allowed: "
                f"{', '.join(spec.phases)})")
    if verb == "start_scan" and not has_calibration:
        return ("illegal-state", "start_scan requires a valid calibration")
    return None
