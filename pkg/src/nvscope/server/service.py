"""Session service: verb dispatch, jobs, persistence, telemetry.

One Service wraps one Instrument (the physical analogue has one
microscope).  Mutating verbs hold the single command lane; acquisition
verbs spawn one cancellable background job at a time and return a job
id immediately — completion, failure, and result envelope ids arrive on
the ``job`` event channel.  Read-only verbs never touch the lane.

The service is transport-agnostic: transports call ``connect()``,
``handle(conn, message)`` and ``disconnect(conn)``, and drain
``conn.queue`` (responses and events, in order) to their socket.
"""

from __future__ import annotations

import json
import logging
import threading
import traceback

import numpy as np

from ..calib import (
    CalibrationError,
    OutOfRangeError,
    acquire_approach_curve,
    calibrate_session,
    pll_suggest,
)
from ..datastore import (
    DataStore,
    NotFoundError,
    canonical_bytes,
    field_map_from_envelope,
    field_map_to_envelope,
    make_provenance,
    Envelope,
)
from ..scanengine import (
    FLAG_NAMES,
    SafetyTripError,
    ScanConfig,
    SweepSettings,
    cross_section,
    estimate_scan_duration,
    lift,
    run_scan,
)
from ..scanengine import approach as approach_tip
from ..sensing import (
    FitFailedError,
    TrackingSweep,
    field_from_dips,
    fit_odmr,
    measure_saturation,
    odmr_sweep,
    sensitivity_empirical,
)
from ..session import Instrument, StateError
from . import machine
from .broker import Broker, Connection
from .protocol import (
    ProtocolError,
    parse_request,
    response_error,
    response_ok,
    validate_params,
)

log = logging.getLogger(__name__)

POSITION_LIMIT = 1e-3      # m, stage travel on either axis
BIAS_LIMIT = 0.2           # T
JOB_JOIN_TIMEOUT = 120.0   # s, abort waits at most this long

_READONLY = {"get_state", "subscribe", "list_data", "load_data",
             "cross_section"}


class VerbError(RuntimeError):
    """A verb failure with an explicit stable error code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class _JobCancelled(Exception):
    """Raised inside a job when abort preempts it."""


class Job:
    def __init__(self, job_id: str, verb: str):
        self.id = job_id
        self.verb = verb
        self.cancel = threading.Event()
        self.done = threading.Event()
        self.thread: threading.Thread | None = None


class Service:
    def __init__(self, instrument: Instrument, store: DataStore, *,
                 queue_size: int = 4096, history_limit: int = 100_000):
        self.instrument = instrument
        self.store = store
        self.broker = Broker(history_limit=history_limit)
        self._lane = threading.RLock()
        self._phase = machine.IDLE
        self._job: Job | None = None
        self._job_counter = 0
        self._controller: int | None = None
        self._calibration_id: str | None = None
        self._conns: dict[int, Connection] = {}
        self._queue_size = queue_size
        self._closed = False

    # -- connection lifecycle -------------------------------------------------

    def connect(self) -> Connection:
        conn = Connection(queue_size=self._queue_size)
        with self._lane:
            if self._closed:
                raise RuntimeError("service is shut down")
            self._conns[conn.id] = conn
        log.info("connection %d opened", conn.id)
        return conn

    def disconnect(self, conn: Connection):
        self.broker.unsubscribe_all(conn)
        with self._lane:
            self._conns.pop(conn.id, None)
            if self._controller == conn.id:
                self._controller = None
                released = True
            else:
                released = False
        if released:
            self._publish_state()
        conn.close()
        log.info("connection %d closed", conn.id)

    def shutdown(self):
        with self._lane:
            self._closed = True
            job = self._job
        if job is not None:
            job.cancel.set()
            job.done.wait(timeout=JOB_JOIN_TIMEOUT)
        for conn in list(self._conns.values()):
            self.disconnect(conn)

    # -- state ---------------------------------------------------------------

    def _state_payload(self) -> dict:
        sess = self.instrument
        job = self._job
        return {
            "phase": self._phase,
            "x_m": sess.x,
            "y_m": sess.y,
            "tip_distance_m": sess.tip_distance,
            "lift_height_m": sess.lift_height,
            "nv_height_m": sess.nv_height(),
            "bias_t": [float(b) for b in sess.bias_field],
            "temperature_k": sess.fork.temperature,
            "active_job": None if job is None else {"id": job.id,
                                                    "verb": job.verb},
            "calibration_id": self._calibration_id,
            "controller": self._controller,
            "clock_s": sess.clock,
        }

    def _publish_state(self):
        with self._lane:
            payload = self._state_payload()
        self.broker.publish("state", payload)

    def _transition(self, event: str):
        self._phase = machine.apply(self._phase, event)

    @property
    def phase(self) -> str:
        with self._lane:
            return self._phase

    # -- request entry point ---------------------------------------------------

    def handle(self, conn: Connection, message: dict):
        """Process one request; the response lands on conn.queue."""
        try:
            req_id, verb, raw_params = parse_request(message)
        except ProtocolError as exc:
            conn.offer(response_error(message.get("id")
                                      if isinstance(message, dict) else None,
                                      "validation", str(exc)))
            return
        if verb not in machine.VERBS:
            conn.offer(response_error(req_id, "validation",
                                      f"unknown verb {verb!r}"))
            return
        try:
            params = validate_params(verb, raw_params)
        except ProtocolError as exc:
            conn.offer(response_error(req_id, "validation", str(exc)))
            return

        try:
            if verb in _READONLY:
                result = getattr(self, "_verb_" + verb)(conn, params)
                conn.offer(response_ok(req_id, result))
                return
            self._handle_mutating(conn, req_id, verb, params)
        except VerbError as exc:
            conn.offer(response_error(req_id, exc.code, str(exc)))
        except ValueError as exc:  # includes ProtocolError
            conn.offer(response_error(req_id, "validation", str(exc)))
        except NotFoundError as exc:
            conn.offer(response_error(req_id, "not-found", str(exc)))
        except StateError as exc:
            conn.offer(response_error(req_id, "illegal-state", str(exc)))
        except Exception as exc:  # defensive: never kill the reader loop
            log.error("internal error handling %s: %s\n%s", verb, exc,
                      traceback.format_exc())
            conn.offer(response_error(req_id, "internal",
                                      f"{type(exc).__name__}: {exc}"))

    def _handle_mutating(self, conn: Connection, req_id, verb: str,
                         params: dict):
        with self._lane:
            error = machine.verb_error(
                verb, self._phase, has_job=self._job is not None,
                is_controller=self._controller == conn.id,
                has_calibration=self.instrument.calibration is not None)
            if error is not None:
                conn.offer(response_error(req_id, *error))
                return
            if verb == "abort":
                job = self._job
                if job is None:
                    self._make_safe()
                    conn.offer(response_ok(req_id, {"phase": self._phase,
                                                    "job_id": None}))
                    return
                job.cancel.set()
            elif machine.VERBS[verb].job:
                getattr(self, "_job_" + verb)(conn, req_id, params)
                return
            else:
                result = getattr(self, "_verb_" + verb)(conn, params)
                conn.offer(response_ok(req_id, result))
                return
        # abort with an active job: wait outside the lane
        job.done.wait(timeout=JOB_JOIN_TIMEOUT)
        conn.offer(response_ok(req_id, {"phase": self.phase,
                                        "job_id": job.id}))

    def _make_safe(self):
        """Retract, clear any fault, and return to idle (lane held)."""
        self._transition("retracting")
        self._publish_state()
        self.instrument.fault = None
        self.instrument.retract()
        self._transition("retracted")
        self._publish_state()
        self.broker.publish("log", {"type": "made_safe",
                                    "message": "tip retracted; phase idle"})

    # -- provenance / persistence ----------------------------------------------

    def _provenance(self) -> dict:
        return make_provenance(config_hash=self.instrument.config_digest,
                               seed=self.instrument.seed)

    def _persist(self, kind: str, payload: dict) -> str:
        env = Envelope(kind=kind, payload=payload,
                       provenance=self._provenance())
        return self.store.save(env)

    # -- read-only verbs --------------------------------------------------------

    def _verb_get_state(self, conn: Connection, params: dict) -> dict:
        with self._lane:
            return {"state": self._state_payload(),
                    "connection_id": conn.id,
                    "is_controller": self._controller == conn.id}

    def _verb_subscribe(self, conn: Connection, params: dict) -> dict:
        return self.broker.subscribe(conn, params["channel"],
                                     params["resume_from"])

    def _verb_list_data(self, conn: Connection, params: dict) -> dict:
        try:
            ids = self.store.list(kind=params["kind"])
        except ValueError as exc:
            raise ProtocolError(str(exc)) from None
        items = []
        for env_id in ids:
            env = self.store.load(env_id)
            items.append({"id": env_id, "kind": env.kind,
                          "created_s": env.provenance.get("created_s"),
                          "seed": env.provenance.get("seed"),
                          "config_hash": env.provenance.get("config_hash")})
        return {"items": items}

    def _verb_load_data(self, conn: Connection, params: dict) -> dict:
        env = self.store.load(params["id"], kind=params["kind"])
        return {"envelope": json.loads(canonical_bytes(env))}

    def _verb_cross_section(self, conn: Connection, params: dict) -> dict:
        env = self.store.load(params["map_id"], kind="field_map")
        fmap = field_map_from_envelope(env)
        peaks = params["peaks"]
        try:
            cs = cross_section(fmap, axis=params["axis"],
                               index=params["index"],
                               peaks=None if peaks is None
                               else np.asarray(peaks, float))
        except ValueError as exc:
            raise ProtocolError(str(exc)) from None
        peaks_out = [{
            "amplitude_t": p.amplitude, "amplitude_std_t": p.amplitude_std,
            "center_m": p.center, "center_std_m": p.center_std,
            "sigma_m": p.sigma, "sigma_std_m": p.sigma_std,
            "fwhm_m": p.fwhm, "fwhm_std_m": p.fwhm_std,
        } for p in cs.peaks]
        payload = {
            "report_type": "cross_section",
            "map_id": params["map_id"],
            "axis": cs.axis, "index": cs.index,
            "line_coord_m": cs.line_coord,
            "positions_m": cs.positions, "b_t": cs.b,
            "sigma_b_t": cs.sigma_b,
            "peaks": peaks_out,
        }
        env_id = self._persist("report", payload)
        return {
            "envelope_id": env_id,
            "axis": cs.axis, "index": cs.index,
            "line_coord_m": cs.line_coord,
            "positions_m": [float(v) for v in cs.positions],
            "b_t": [float(v) for v in cs.b],
            "sigma_b_t": [float(v) for v in cs.sigma_b],
            "peaks": peaks_out,
        }

    # -- quick mutating verbs -----------------------------------------------------

    def _verb_take_control(self, conn: Connection, params: dict) -> dict:
        if self._controller is not None and self._controller != conn.id:
            raise VerbError(
                "not-controller",
                f"controller token held by connection {self._controller}")
        self._controller = conn.id
        self._publish_state()
        return {"controller": True, "connection_id": conn.id}

    def _verb_release_control(self, conn: Connection, params: dict) -> dict:
        if self._controller != conn.id:
            raise VerbError("not-controller",
                            "connection does not hold the controller token")
        self._controller = None
        self._publish_state()
        return {"controller": False, "connection_id": conn.id}

    def _verb_set_bias_field(self, conn: Connection, params: dict) -> dict:
        b = np.asarray(params["b"], float)
        if np.linalg.norm(b) > BIAS_LIMIT:
            raise ProtocolError(f"|bias| must be <= {BIAS_LIMIT} T")
        self.instrument.set_bias(b)
        self._publish_state()
        return {"state": self._state_payload()}

    def _verb_move_to(self, conn: Connection, params: dict) -> dict:
        x, y = params["x"], params["y"]
        if abs(x) > POSITION_LIMIT or abs(y) > POSITION_LIMIT:
            raise ProtocolError(f"|x|, |y| must be <= {POSITION_LIMIT} m")
        self.instrument.move_xy(x, y)
        self._publish_state()
        return {"state": self._state_payload()}

    def _verb_lift(self, conn: Connection, params: dict) -> dict:
        try:
            lift(self.instrument, params["height"])
        except ValueError as exc:
            raise ProtocolError(str(exc)) from None
        self._publish_state()
        return {"height_m": params["height"],
                "nv_height_m": self.instrument.nv_height()}

    # -- jobs ----------------------------------------------------------------------

    def _spawn(self, conn: Connection, req_id, verb: str, work,
               start_event: str | None = None, extra: dict | None = None):
        """Start a job (lane held): respond with the id, then run work."""
        self._job_counter += 1
        job = Job(f"job-{self._job_counter}", verb)
        self._job = job
        if start_event is not None:
            self._transition(start_event)
        result = {"job_id": job.id}
        if extra:
            result.update(extra)
        conn.offer(response_ok(req_id, result))
        self._publish_state()
        self.broker.publish("job", {"type": "started", "job_id": job.id,
                                    "verb": verb})
        job.thread = threading.Thread(target=self._run_job,
                                      args=(job, work),
                                      name=job.id, daemon=True)
        job.thread.start()

    def _run_job(self, job: Job, work):
        """Job thread body: run, then transition and publish the outcome."""
        outcome_event: str | None = None
        summary: dict = {}
        error: tuple[str, str] | None = None
        status = "completed"
        try:
            outcome_event, summary = work(job)
        except _JobCancelled as exc:
            status = "aborted"
            outcome_event = "make_safe"
            summary = {"message": str(exc) or "job aborted"}
        except (ProtocolError, ValueError, OutOfRangeError) as exc:
            status, error = "failed", ("validation", str(exc))
            outcome_event = getattr(exc, "outcome_event", None)
        except StateError as exc:
            status, error = "failed", ("illegal-state", str(exc))
        except (FitFailedError, CalibrationError) as exc:
            status, error = "failed", ("measurement-failed", str(exc))
        except SafetyTripError as exc:
            status, error = "failed", ("measurement-failed", str(exc))
            outcome_event = "make_safe"  # the tip auto-retracted
        except Exception as exc:  # unexpected: latch the fault phase
            log.error("job %s crashed: %s\n%s", job.id, exc,
                      traceback.format_exc())
            status, error = "failed", ("internal",
                                       f"{type(exc).__name__}: {exc}")
            outcome_event = "fault"
        finally:
            with self._lane:
                if job.verb == "start_scan":
                    # a scan always leaves the scanning phase first
                    self._transition("scan_finished")
                if outcome_event == "make_safe":
                    self._transition("retracting")
                    self._publish_state()
                    self.instrument.retract()
                    self._transition("retracted")
                elif outcome_event == "fault":
                    self.instrument.fault = (error[1] if error
                                             else "job crashed")
                    self._transition("fault")
                elif outcome_event is not None:
                    self._transition(outcome_event)
                self._job = None
                job.done.set()
            self._publish_state()
            payload = {"type": status, "job_id": job.id, "verb": job.verb}
            if error is not None:
                payload["error"] = {"code": error[0], "message": error[1]}
            payload.update(summary)
            self.broker.publish("job", payload)
            self.broker.publish("log", {"type": "job", "status": status,
                                        "job_id": job.id, "verb": job.verb,
                                        **({"message": error[1]}
                                           if error else {})})

    def _check_cancel(self, job: Job):
        if job.cancel.is_set():
            raise _JobCancelled()

    # each _job_* runs with the lane held and must only spawn

    def _job_calibrate_brownian(self, conn: Connection, req_id,
                                params: dict):
        if params["n_avg"] < 2 or params["n_bins"] < 16:
            raise ProtocolError("n_avg must be >= 2 and n_bins >= 16")
        if params["span"] <= 0:
            raise ProtocolError("span must be > 0")

        def work(job: Job):
            rec = calibrate_session(self.instrument, span=params["span"],
                                    n_bins=params["n_bins"],
                                    n_avg=params["n_avg"])
            env_id = self._persist("calibration", {
                "alpha": rec.alpha, "alpha_std": rec.alpha_std,
                "f_res": rec.f_res, "f_res_std": rec.f_res_std,
                "q": rec.q, "q_std": rec.q_std,
                "m_eff": rec.m_eff, "temperature": rec.temperature,
                "s_en": rec.s_en, "timestamp": rec.timestamp,
                "n_avg": params["n_avg"], "span": params["span"],
                "n_bins": params["n_bins"],
            })
            with self._lane:
                self._calibration_id = env_id
            return "calibrated", {
                "envelope_id": env_id,
                "alpha_v_per_m": rec.alpha, "alpha_std": rec.alpha_std,
                "f_res_hz": rec.f_res, "f_res_std_hz": rec.f_res_std,
                "q": rec.q, "q_std": rec.q_std,
            }

        self._spawn(conn, req_id, "calibrate_brownian", work)

    def _job_approach_curve(self, conn: Connection, req_id, params: dict):
        if params["n"] < 2:
            raise ProtocolError("n must be >= 2")
        if not params["start"] < params["stop"]:
            raise ProtocolError("start must be below stop (far to near)")
        if params["n_avg"] < 1:
            raise ProtocolError("n_avg must be >= 1")
        distances = np.linspace(params["start"], params["stop"],
                                params["n"])

        def work(job: Job):
            def progress(i, total):
                self._check_cancel(job)

            try:
                curve = acquire_approach_curve(
                    self.instrument, distances, n_avg=params["n_avg"],
                    progress=progress)
            finally:
                self.instrument.retract()
            payload = {
                "distances": curve.distances,
                "amplitude": curve.amplitude,
                "amplitude_std": curve.amplitude_std,
                "f0": curve.f0, "f0_std": curve.f0_std,
                "q": curve.q, "q_std": curve.q_std,
                "aborted": curve.aborted,
                "metadata": curve.metadata,
            }
            summary = {"aborted_by_safety": curve.aborted,
                       "n_points": len(curve)}
            if params["setpoint"] is not None:
                suggestion = pll_suggest(curve, params["setpoint"])
                payload["pll_suggestion"] = suggestion
                summary["pll_suggestion"] = suggestion
            env_id = self._persist("approach_curve", payload)
            summary["envelope_id"] = env_id
            return None, summary

        self._spawn(conn, req_id, "approach_curve", work)

    def _job_approach(self, conn: Connection, req_id, params: dict):
        if params["setpoint"] <= 0:
            raise ProtocolError("setpoint must be > 0")
        if params["step"] <= 0 or params["t_avg"] <= 0:
            raise ProtocolError("step and t_avg must be > 0")

        def work(job: Job):
            def progress(n_steps, d, shift):
                self._check_cancel(job)

            try:
                res = approach_tip(self.instrument, params["setpoint"],
                                   step=params["step"],
                                   t_avg=params["t_avg"],
                                   progress=progress)
            except OutOfRangeError as exc:
                # the tip was retracted by the failed approach
                exc.outcome_event = "make_safe"
                raise
            return "approached", {
                "tip_distance_m": res.tip_distance,
                "shift_hz": res.shift,
                "n_steps": res.n_steps,
            }

        self._spawn(conn, req_id, "approach", work)

    def _job_odmr_sweep(self, conn: Connection, req_id, params: dict):
        if not params["f_start"] < params["f_stop"]:
            raise ProtocolError("f_start must be < f_stop")
        if params["n_points"] < 8:
            raise ProtocolError("n_points must be >= 8")
        if params["t_per_point"] <= 0 or params["p_opt"] < 0:
            raise ProtocolError("t_per_point must be > 0 and p_opt >= 0")

        def work(job: Job):
            spec = odmr_sweep(self.instrument, params["f_start"],
                              params["f_stop"], params["n_points"],
                              params["t_per_point"], params["p_opt"])
            # decimate to ~100 ms of simulated time per batch; the final
            # point always ships with the last batch
            chunk = max(1, round(0.1 / params["t_per_point"]))
            n = len(spec)
            for i in range(0, n, chunk):
                self.broker.publish("sweep_live", {
                    "type": "points", "start": i,
                    "f_hz": spec.freqs[i:i + chunk],
                    "counts": spec.counts[i:i + chunk],
                    "n_total": n,
                })
            fit_out = None
            fit_error = None
            try:
                odfit = fit_odmr(spec)
                nv = self.instrument.nv
                if odfit.single_dip:
                    b_par, b_std = None, None
                else:
                    b_par = field_from_dips(odfit.f_minus, odfit.f_plus, nv)
                    b_std = float(np.hypot(odfit.f_minus_std,
                                           odfit.f_plus_std) / (2 * nv.gamma))
                fit_out = {
                    "f_minus_hz": odfit.f_minus,
                    "f_minus_std_hz": odfit.f_minus_std,
                    "f_plus_hz": odfit.f_plus,
                    "f_plus_std_hz": odfit.f_plus_std,
                    "contrast": odfit.contrast,
                    "contrast_std": odfit.contrast_std,
                    "linewidth_hz": odfit.linewidth,
                    "linewidth_std_hz": odfit.linewidth_std,
                    "single_dip": odfit.single_dip,
                    "chi2_reduced": odfit.fit.chi2_reduced,
                    "b_parallel_t": b_par,
                    "b_parallel_std_t": b_std,
                }
            except FitFailedError as exc:
                fit_error = str(exc)
            self.broker.publish("sweep_live", {
                "type": "sweep_done", "fit": fit_out,
                "fit_error": fit_error,
            })
            env_id = self._persist("spectrum", {
                "freqs": spec.freqs, "counts": spec.counts,
                "t_per_point": spec.t_per_point, "p_opt": spec.p_opt,
                "metadata": spec.metadata,
                "fit": fit_out,
            })
            summary = {"envelope_id": env_id, "fit": fit_out}
            if fit_error is not None:
                summary["fit_error"] = fit_error
            return None, summary

        self._spawn(conn, req_id, "odmr_sweep", work)

    def _job_measure_saturation(self, conn: Connection, req_id,
                                params: dict):
        if params["n"] < 6:
            raise ProtocolError("n must be >= 6")
        if params["p_max"] <= 0 or params["t_per_point"] <= 0:
            raise ProtocolError("p_max and t_per_point must be > 0")
        powers = np.linspace(params["p_max"] / params["n"], params["p_max"],
                             params["n"])

        def work(job: Job):
            curve, res = measure_saturation(self.instrument, powers,
                                            t_per_point=params["t_per_point"])
            errs = res.std_errors
            env_id = self._persist("report", {
                "report_type": "saturation",
                "powers": curve.powers, "rates": curve.rates,
                "rate_std": curve.rate_std,
                "r_inf": res.params[0], "r_inf_std": errs[0],
                "p_sat": res.params[1], "p_sat_std": errs[1],
                "bg_slope": res.params[2], "dark_rate": res.params[3],
                "chi2_reduced": res.chi2_reduced,
            })
            return None, {
                "envelope_id": env_id,
                "r_inf_per_s": res.params[0], "r_inf_std": errs[0],
                "p_sat_w": res.params[1], "p_sat_std": errs[1],
                "chi2_reduced": res.chi2_reduced,
            }

        self._spawn(conn, req_id, "measure_saturation", work)

    def _job_sensitivity_run(self, conn: Connection, req_id, params: dict):
        if params["n"] < 100:
            raise ProtocolError("n must be >= 100")
        if params["t"] <= 0 or params["bin"] <= 0:
            raise ProtocolError("t and bin must be > 0")

        def work(job: Job):
            rep = sensitivity_empirical(
                self.instrument, n_meas=params["n"], t_meas=params["t"],
                sweep=TrackingSweep(bin_width=params["bin"]))
            env_id = self._persist("report", {
                "report_type": "sensitivity",
                "sigma_formula": rep.sigma_formula,
                "sigma_empirical": rep.sigma_empirical,
                "sigma_empirical_std": rep.sigma_empirical_std,
                "n_meas": rep.n_meas, "t_meas": rep.t_meas,
                "bin_edges": rep.bin_edges, "bin_counts": rep.bin_counts,
                "degraded": rep.degraded, "metadata": rep.metadata,
            })
            return None, {
                "envelope_id": env_id,
                "sigma_formula_t": rep.sigma_formula,
                "sigma_empirical_t": rep.sigma_empirical,
                "sigma_empirical_std_t": rep.sigma_empirical_std,
                "n_meas": rep.n_meas,
                "degraded": rep.degraded,
            }

        self._spawn(conn, req_id, "sensitivity_run", work)

    def _job_start_scan(self, conn: Connection, req_id, params: dict):
        try:
            cfg = ScanConfig(
                extent=tuple(params["extent"]),
                pixel_pitch=params["pixel_pitch"],
                origin=tuple(params["origin"]),
                lift_height=params["lift_height"],
                sweep=SweepSettings(
                    n_points=params["n_points"],
                    t_per_point=params["t_per_point"],
                    p_opt=params["p_opt"],
                    stray_span=params["stray_span"],
                    shot_noise=not params["noiseless"],
                ),
                timeout_per_pixel=params["timeout_per_pixel"],
                bias_parallel=params["bias_parallel"],
                extraction=params["extraction"],
                serpentine=params["serpentine"],
            )
        except ValueError as exc:
            raise ProtocolError(str(exc)) from None

        def work(job: Job):
            def on_row(iy, row):
                self.broker.publish("scan_progress", {
                    "type": "row", "index": iy,
                    "y_m": float(cfg.y_coords[iy]),
                    "x_m": cfg.x_coords,
                    "b_t": row["b"], "sigma_t": row["sigma_b"],
                    "f_minus_hz": row["f_minus"],
                    "f_plus_hz": row["f_plus"],
                    "contrast": row["contrast"],
                    "chi2": row["chi2"],
                    "t_pixel_s": row["t_pixel"],
                    "flags": row["flags"],
                    "rows_completed": iy + 1,
                })

            fmap = run_scan(self.instrument, cfg, on_row=on_row,
                            should_abort=job.cancel.is_set)
            env_id = self.store.save(
                field_map_to_envelope(fmap, self._provenance()))
            flag_counts = {FLAG_NAMES[code]: int(n) for code, n in
                           zip(*np.unique(fmap.flags, return_counts=True))}
            self.broker.publish("scan_progress", {
                "type": "completed", "envelope_id": env_id,
                "rows_completed": fmap.rows_completed,
                "aborted": fmap.aborted,
                "flag_counts": flag_counts,
            })
            return None, {
                "envelope_id": env_id,
                "rows_completed": fmap.rows_completed,
                "aborted": fmap.aborted,
                "flag_counts": flag_counts,
                "duration_s": fmap.t_end - fmap.t_start,
            }

        self._spawn(conn, req_id, "start_scan", work,
                    start_event="scan_started",
                    extra={"nx": cfg.nx, "ny": cfg.ny,
                           "origin_m": list(cfg.origin),
                           "pitch_m": cfg.pixel_pitch,
                           "estimate_s": estimate_scan_duration(cfg)})
