"""Operator command line for the virtual scanning NV magnetometer.

Subcommands drive a running control server (calibrate, approach, sweep,
scan, ...) or work offline on the datastore (replay).  Every analysis
command renders the stored envelope through the same code path, so
`replay <id>` reproduces the live run's CSV byte for byte.
"""
from __future__ import annotations

import argparse
import logging
import sys
import threading
from pathlib import Path

from ..datastore import DataStore, DataStoreError, envelope_from_json
from .client import (
    ADDR_ENV_VAR,
    DEFAULT_ADDR,
    EXIT_CONNECTION,
    EXIT_NOT_FOUND,
    EXIT_OK,
    EXIT_USAGE,
    CliError,
    ServerClient,
    resolve_addr,
)
from .format import grid_table, kv_table, si_format
from .render import render_envelope

__all__ = ["main", "build_parser"]

log = logging.getLogger(__name__)

DATA_ROOT_ENV_VAR = "NVSCOPE_DATA_ROOT"
DEFAULT_DATA_ROOT = "./nvscope-data"


# -- argument helpers --------------------------------------------------------


def _size(text: str):
    """Parse 'NXxNY' (pixels), e.g. 64x64."""
    parts = text.lower().split("x")
    try:
        nx, ny = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"size must look like 64x64, got {text!r}") from None
    if nx < 1 or ny < 1:
        raise argparse.ArgumentTypeError("size must be at least 1x1")
    return nx, ny


def _pair(text: str):
    """Parse 'X,Y' as two floats (SI units, scientific notation ok)."""
    parts = text.split(",")
    try:
        x, y = (float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected X,Y floats, got {text!r}") from None
    return x, y


def _float_list(text: str):
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated floats, got {text!r}") from None


def _nullable_float(text: str):
    if text.lower() in ("none", "null"):
        return None
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected a float or 'none', got {text!r}") from None


def _positive(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return value


# -- shared output plumbing ---------------------------------------------------


def _connect(args) -> ServerClient:
    return ServerClient(resolve_addr(args.addr))


def _emit(rendering, env_id: str) -> None:
    print(f"{rendering.title}  id={env_id}")
    print(rendering.text)
    print(f"csv: {rendering.csv_path}")
    if rendering.svg_path is not None:
        print(f"svg: {rendering.svg_path}")


def _render_remote(client: ServerClient, env_id: str, args) -> None:
    doc = client.call("load_data", id=env_id)["envelope"]
    env = envelope_from_json(doc)
    _emit(render_envelope(env, env_id, Path(args.out), svg=args.svg), env_id)


def _write_summary_csv(path: Path, rows) -> None:
    import csv

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["quantity", "value"])
        for name, value in rows:
            writer.writerow([name, repr(float(value))])


def _progress(channel: str, payload: dict) -> None:
    """One stderr line per telemetry event while a job runs."""
    kind = payload.get("type")
    if channel == "scan_progress" and kind == "row":
        print(f"  row {payload['rows_completed']} done", file=sys.stderr)
    elif channel == "sweep_live" and kind == "points":
        done = payload["start"] + len(payload["f_hz"])
        print(f"  point {done}/{payload['n_total']}", file=sys.stderr)
    elif channel == "log" and kind == "safety":
        print(f"  safety: {payload.get('message', '')}", file=sys.stderr)


# -- subcommands --------------------------------------------------------------


def cmd_serve(args) -> int:
    from ..server import serve

    config: dict = {}
    if args.config is not None:
        import json

        with open(args.config) as fh:
            config = json.load(fh)
        if not isinstance(config, dict):
            raise CliError(EXIT_USAGE, "config file must hold a JSON object")
    section = dict(config.get("server", {}))
    overrides = {
        "host": args.host, "port": args.port, "ws_port": args.ws_port,
        "data_root": args.data_root, "seed": args.seed,
    }
    section.update({k: v for k, v in overrides.items() if v is not None})
    if args.real_time:
        section["accelerated"] = False
    config["server"] = section

    handle = serve(config)
    print(f"nvscope server on tcp {handle.tcp_port}, "
          f"websocket {handle.ws_port} (ctrl-c to stop)", file=sys.stderr)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        print("stopping", file=sys.stderr)
    finally:
        handle.stop()
    return EXIT_OK


def cmd_calibrate(args) -> int:
    with _connect(args) as client:
        client.take_control()
        summary = client.run_job("calibrate_brownian", {
            "n_avg": args.n_avg, "span": args.span, "n_bins": args.n_bins,
        })
        _render_remote(client, summary["envelope_id"], args)
    return EXIT_OK


def cmd_approach_curve(args) -> int:
    with _connect(args) as client:
        client.take_control()
        summary = client.run_job("approach_curve", {
            "start": args.start, "stop": args.stop, "n": args.n,
            "n_avg": args.n_avg, "setpoint": args.setpoint,
        })
        _render_remote(client, summary["envelope_id"], args)
    return EXIT_OK


def cmd_approach(args) -> int:
    with _connect(args) as client:
        client.take_control()
        summary = client.run_job("approach", {
            "setpoint": args.setpoint, "step": args.step,
            "t_avg": args.t_avg,
        })
        print("approach finished")
        print(kv_table([
            ("tip distance", si_format(summary["tip_distance_m"], "m")),
            ("frequency shift", si_format(summary["shift_hz"], "Hz")),
            ("steps", str(summary["n_steps"])),
        ]))
        csv_path = Path(args.out) / "approach_summary.csv"
        _write_summary_csv(csv_path, [
            ("tip_distance_m", summary["tip_distance_m"]),
            ("shift_hz", summary["shift_hz"]),
            ("n_steps", summary["n_steps"]),
        ])
        print(f"csv: {csv_path}")
    return EXIT_OK


def cmd_lift(args) -> int:
    with _connect(args) as client:
        client.take_control()
        result = client.call("lift", height=args.height)
        print("lift finished")
        print(kv_table([
            ("tip standoff", si_format(result["height_m"], "m")),
            ("NV standoff", si_format(result["nv_height_m"], "m")),
        ]))
        csv_path = Path(args.out) / "lift_summary.csv"
        _write_summary_csv(csv_path, [
            ("height_m", result["height_m"]),
            ("nv_height_m", result["nv_height_m"]),
        ])
        print(f"csv: {csv_path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.f_start >= args.f_stop:
        raise CliError(EXIT_USAGE, "--f-start must be below --f-stop")
    with _connect(args) as client:
        client.take_control()
        client.subscribe("sweep_live")
        summary = client.run_job("odmr_sweep", {
            "f_start": args.f_start, "f_stop": args.f_stop,
            "n_points": args.n_points, "t_per_point": args.t_per_point,
            "p_opt": args.p_opt,
        }, on_event=_progress)
        _render_remote(client, summary["envelope_id"], args)
    return EXIT_OK


def cmd_saturation(args) -> int:
    with _connect(args) as client:
        client.take_control()
        summary = client.run_job("measure_saturation", {
            "p_max": args.p_max, "n": args.n,
            "t_per_point": args.t_per_point,
        })
        _render_remote(client, summary["envelope_id"], args)
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    with _connect(args) as client:
        client.take_control()
        summary = client.run_job("sensitivity_run", {
            "n": args.n, "t": args.t, "bin": args.bin,
        })
        _render_remote(client, summary["envelope_id"], args)
    return EXIT_OK


def cmd_scan(args) -> int:
    nx, ny = args.size
    extent = (nx * args.pitch, ny * args.pitch)
    with _connect(args) as client:
        client.take_control()
        client.subscribe("scan_progress", "log")
        summary = client.run_job("start_scan", {
            "extent": list(extent), "pixel_pitch": args.pitch,
            "origin": list(args.origin), "lift_height": args.lift,
            "noiseless": args.noiseless, "n_points": args.n_points,
            "t_per_point": args.t_per_point, "p_opt": args.p_opt,
            "stray_span": args.stray_span,
            "bias_parallel": args.bias_parallel,
            "extraction": args.extraction,
            "serpentine": not args.no_serpentine,
            "timeout_per_pixel": args.timeout_per_pixel,
        }, on_event=_progress)
        _render_remote(client, summary["envelope_id"], args)
    return EXIT_OK


def cmd_cross_section(args) -> int:
    with _connect(args) as client:
        result = client.call(
            "cross_section", map_id=args.map_id, axis=args.axis,
            index=args.index, peaks=args.peaks)
        _render_remote(client, result["envelope_id"], args)
    return EXIT_OK


def cmd_export(args) -> int:
    with _connect(args) as client:
        if args.id is None:
            items = client.call("list_data", kind=args.kind)["items"]
            if not items:
                print("no stored data")
                return EXIT_OK
            print(grid_table(
                ["id", "kind", "created_s"],
                [[it["id"], it["kind"], repr(it["created_s"])]
                 for it in items]))
            return EXIT_OK
        _render_remote(client, args.id, args)
    return EXIT_OK


def cmd_replay(args) -> int:
    import os

    root = args.data_root or os.environ.get(DATA_ROOT_ENV_VAR,
                                            DEFAULT_DATA_ROOT)
    store = DataStore(root)
    try:
        env = store.load(args.id)
    except DataStoreError as exc:
        raise CliError(EXIT_NOT_FOUND, f"replay: {exc}") from exc
    _emit(render_envelope(env, args.id, Path(args.out), svg=args.svg),
          args.id)
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nvscope",
        description="Virtual scanning NV magnetometer operator CLI.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log to stderr at INFO level")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")

    net = argparse.ArgumentParser(add_help=False)
    net.add_argument("--addr", default=None, metavar="HOST:PORT",
                     help=f"server address (default ${ADDR_ENV_VAR} "
                          f"or {DEFAULT_ADDR})")
    out = argparse.ArgumentParser(add_help=False)
    out.add_argument("--out", default=".", metavar="DIR",
                     help="directory for CSV/SVG outputs (default .)")
    out.add_argument("--svg", action="store_true",
                     help="also write an SVG plot")

    p = sub.add_parser("serve", help="run a local instrument server")
    p.add_argument("--config", metavar="PATH",
                   help="JSON config file (server + model sections)")
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None,
                   help="TCP NDJSON port (default 8770)")
    p.add_argument("--ws-port", type=int, default=None,
                   help="WebSocket port (default 8771)")
    p.add_argument("--data-root", default=None, metavar="DIR",
                   help="datastore directory (default ./nvscope-data)")
    p.add_argument("--seed", type=int, default=None,
                   help="instrument RNG seed; with a fixed seed the same "
                        "command sequence reproduces identical data")
    p.add_argument("--real-time", action="store_true",
                   help="sleep for real acquisition times instead of "
                        "simulated clock")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("calibrate", parents=[net, out],
                       help="tuning-fork calibration from Brownian motion")
    p.add_argument("--n-avg", type=int, default=400,
                   help="averaged spectra (default 400)")
    p.add_argument("--span", type=_positive, default=40.0,
                   help="PSD half-span around resonance, Hz (default 40)")
    p.add_argument("--n-bins", type=int, default=800,
                   help="frequency bins (default 800)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("approach-curve", parents=[net, out],
                       help="step the tip toward the surface, record "
                            "amplitude and resonance vs distance")
    p.add_argument("--start", type=float, default=-6e-9,
                   help="far distance, m; negative = out of contact "
                        "(default -6e-9; use --start=-4e-9 form)")
    p.add_argument("--stop", type=float, default=0.3e-9,
                   help="near distance, m (default 0.3e-9)")
    p.add_argument("--n", type=int, default=64,
                   help="number of distances (default 64)")
    p.add_argument("--n-avg", type=int, default=16,
                   help="averages per point (default 16)")
    p.add_argument("--setpoint", type=_nullable_float, default=None,
                   metavar="HZ",
                   help="when set, suggest PLL gains for this "
                        "frequency-shift setpoint")
    p.set_defaults(func=cmd_approach_curve)

    p = sub.add_parser("approach", parents=[net, out],
                       help="closed-loop approach to a frequency-shift "
                            "setpoint")
    p.add_argument("--setpoint", type=_positive, required=True, metavar="HZ",
                   help="target frequency shift, Hz")
    p.add_argument("--step", type=_positive, default=0.2e-9,
                   help="step size, m (default 0.2e-9)")
    p.add_argument("--t-avg", type=_positive, default=20e-3,
                   help="averaging time per step, s (default 20e-3)")
    p.set_defaults(func=cmd_approach)

    p = sub.add_parser("lift", parents=[net, out],
                       help="retract to a fixed standoff above contact")
    p.add_argument("--height", type=_positive, required=True, metavar="M",
                   help="standoff above the contact point, m")
    p.set_defaults(func=cmd_lift)

    p = sub.add_parser("sweep", parents=[net, out],
                       help="CW-ODMR frequency sweep with dip fit")
    p.add_argument("--f-start", type=_positive, required=True, metavar="HZ")
    p.add_argument("--f-stop", type=_positive, required=True, metavar="HZ")
    p.add_argument("--n-points", type=int, default=96,
                   help="sweep points (default 96)")
    p.add_argument("--t-per-point", type=_positive, default=6e-3,
                   help="dwell per point, s (default 6e-3)")
    p.add_argument("--p-opt", type=_positive, default=13e-6,
                   help="optical power, W (default 13e-6)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("saturation", parents=[net, out],
                       help="photon rate vs optical power with "
                            "saturation fit")
    p.add_argument("--p-max", type=_positive, default=500e-6,
                   help="maximum optical power, W (default 500e-6)")
    p.add_argument("--n", type=int, default=24,
                   help="power steps (default 24)")
    p.add_argument("--t-per-point", type=_positive, default=0.05,
                   help="dwell per power, s (default 0.05)")
    p.set_defaults(func=cmd_saturation)

    p = sub.add_parser("sensitivity", parents=[net, out],
                       help="repeated field measurements quantifying "
                            "magnetic sensitivity")
    p.add_argument("--n", type=int, default=500,
                   help="number of measurements (default 500)")
    p.add_argument("--t", type=_positive, default=1.0,
                   help="duration of each measurement, s (default 1)")
    p.add_argument("--bin", type=_positive, default=0.56e-6,
                   help="histogram bin width, T (default 0.56e-6)")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("scan", parents=[net, out],
                       help="raster a constant-height field map")
    p.add_argument("--size", type=_size, required=True, metavar="NXxNY",
                   help="grid size in pixels, e.g. 64x64")
    p.add_argument("--pitch", type=_positive, required=True, metavar="M",
                   help="pixel pitch, m (e.g. 20e-9)")
    p.add_argument("--lift", type=float, default=50e-9, metavar="M",
                   help="lift height above contact, m (default 50e-9)")
    p.add_argument("--origin", type=_pair, default=(0.0, 0.0), metavar="X,Y",
                   help="scan origin, m (default 0,0)")
    p.add_argument("--noiseless", action="store_true",
                   help="record expected counts instead of Poisson draws")
    p.add_argument("--n-points", type=int, default=96,
                   help="sweep points per pixel (default 96)")
    p.add_argument("--t-per-point", type=_positive, default=6e-3,
                   help="dwell per sweep point, s (default 6e-3)")
    p.add_argument("--p-opt", type=_positive, default=13e-6,
                   help="optical power, W (default 13e-6)")
    p.add_argument("--stray-span", type=_positive, default=2e-3,
                   help="expected stray-field span, T (default 2e-3)")
    p.add_argument("--bias-parallel", type=_nullable_float, default=2e-3,
                   metavar="T",
                   help="bias along the NV axis at scan start; 'none' "
                        "keeps the current bias (default 2e-3)")
    p.add_argument("--extraction", choices=("double", "single"),
                   default="double",
                   help="dip-extraction mode (default double)")
    p.add_argument("--no-serpentine", action="store_true",
                   help="scan every row left to right")
    p.add_argument("--timeout-per-pixel", type=_positive, default=2.0,
                   help="per-pixel time budget, s (default 2)")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("cross-section", parents=[net, out],
                       help="fit Gaussian peaks along a stored map line")
    p.add_argument("map_id", help="field_map envelope id")
    p.add_argument("--axis", choices=("x", "y"), default="x",
                   help="profile direction (default x)")
    p.add_argument("--index", type=int, required=True,
                   help="row (axis=x) or column (axis=y) index")
    p.add_argument("--peaks", type=_float_list, default=None, metavar="M,M",
                   help="fit peaks at these positions instead of "
                        "auto-detecting")
    p.set_defaults(func=cmd_cross_section)

    p = sub.add_parser("export", parents=[net, out],
                       help="render a stored envelope from the server "
                            "(no id: list stored data)")
    p.add_argument("id", nargs="?", default=None,
                   help="envelope id; omit to list stored data")
    p.add_argument("--kind", default=None,
                   help="filter the listing by kind")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("replay", parents=[out],
                       help="re-render a stored envelope offline, "
                            "byte-identical to the live output")
    p.add_argument("id", help="envelope id")
    p.add_argument("--data-root", default=None, metavar="DIR",
                   help=f"datastore directory (default ${DATA_ROOT_ENV_VAR} "
                        f"or {DEFAULT_DATA_ROOT})")
    p.set_defaults(func=cmd_replay)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONNECTION
    except KeyboardInterrupt:
        return 130
