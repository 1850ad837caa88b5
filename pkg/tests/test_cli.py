"""Operator CLI: formatting contract, argument plumbing, exit codes, and
end-to-end runs against a live server with bit-identical replay."""
from __future__ import annotations

import csv
import math
import signal
import subprocess
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest

from nvscope.cli import _nullable_float, _pair, _size, build_parser, main
from nvscope.cli.client import resolve_addr, _split_addr, CliError
from nvscope.cli.format import grid_table, kv_table, si_format, si_pair, to_fixed
from nvscope.server import serve


# ---------------------------------------------------------------------------
# formatting contract (frozen vectors, verified against Number.toFixed)
# ---------------------------------------------------------------------------

# fmt: off
TO_FIXED_VECTORS = [
    # ties round away from zero (sign peeled first), like JS toFixed
    (0.125, 2, "0.13"),
    (-0.125, 2, "-0.13"),
    (2.5, 0, "3"),
    (-2.5, 0, "-3"),
    # values that look like ties in decimal but are not in binary
    (1.005, 2, "1.00"),
    (2.675, 2, "2.67"),
    (0.99995, 4, "1.0000"),
    # exact binary ties
    (1.25, 1, "1.3"),
    (-1.25, 1, "-1.3"),
    (1.35, 1, "1.4"),
    # sign of rounded-to-zero values is kept, like JS
    (-0.4, 0, "-0"),
    (0.0, 2, "0.00"),
    (-0.0, 2, "0.00"),
    (1e-7, 2, "0.00"),
    (5e-324, 3, "0.000"),
    (123.456, 1, "123.5"),
    (-123.456, 1, "-123.5"),
    (9.995, 2, "9.99"),
    (1.5, 12, "1.500000000000"),
    (float("nan"), 2, "NaN"),
    (float("inf"), 2, "Infinity"),
    (float("-inf"), 2, "-Infinity"),
]

SI_VECTORS = [
    (3.47e-6, "T/√Hz", "3.470 µT/√Hz"),
    (2.87e9, "Hz", "2.870 GHz"),
    (56.1e-9, "m", "56.10 nm"),
    (-0.0006564685703590006, "T", "-656.5 µT"),
    (1.0, "V", "1.000 V"),
    (13e-6, "W", "13.00 µW"),
    (999.9999999, "Hz", "1000.0 Hz"),   # rounds past its own scale
    (4.2e15, "Hz", "4200 THz"),         # clamped at the top prefix
    (1e-17, "T", "0.010 fT"),           # clamped at the bottom prefix
    (0.0, "T", "0 T"),
    (None, "T", "nan T"),
    (float("nan"), "T", "nan T"),
    (float("inf"), "W", "inf W"),
    (float("-inf"), "W", "-inf W"),
    # dimensionless values never get a prefix
    (0.15, "", "0.150"),
    (24926.0, "", "24926"),
    (-1.0, "", "-1.000"),
    (0.0, "", "0"),
    (None, "", "nan"),
]
# fmt: on


@pytest.mark.parametrize("value, digits, expected", TO_FIXED_VECTORS)
def test_to_fixed_vectors(value, digits, expected):
    assert to_fixed(value, digits) == expected


def test_to_fixed_digit_bounds():
    with pytest.raises(ValueError):
        to_fixed(1.0, -1)
    with pytest.raises(ValueError):
        to_fixed(1.0, 101)


@pytest.mark.parametrize("value, unit, expected", SI_VECTORS)
def test_si_format_vectors(value, unit, expected):
    assert si_format(value, unit) == expected


def test_si_format_micro_is_u00b5():
    assert "µ" in si_format(1e-6, "T")


def test_si_pair():
    assert si_pair(2.87e9, 1.2e5, "Hz") == "2.870 GHz ± 120.0 kHz"
    assert si_pair(2.87e9, None, "Hz") == "2.870 GHz"
    assert si_pair(None, None, "T") == "nan T"
    assert si_pair(0.15, 0.009) == "0.150 ± 0.009"


def test_kv_table_alignment():
    text = kv_table([("a", "1"), ("longer", "2")])
    assert text == "  a      : 1\n  longer : 2"


def test_grid_table_shape():
    text = grid_table(["x", "yy"], [["1", "2"], ["333", "4"]])
    lines = text.splitlines()
    assert lines[0] == "  x    yy"
    assert lines[1] == "  ---  --"
    assert lines[2] == "  1    2"
    assert lines[3] == "  333  4"
    assert not any(line != line.rstrip() for line in lines)


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


def test_size_parser():
    assert _size("64x64") == (64, 64)
    assert _size("6X4") == (6, 4)
    for bad in ("64", "0x4", "4x-1", "axb", "4x4x4"):
        with pytest.raises(Exception):
            _size(bad)


def test_pair_parser():
    assert _pair("1e-6,-2e-6") == (1e-6, -2e-6)
    for bad in ("1", "1,2,3", "a,b"):
        with pytest.raises(Exception):
            _pair(bad)


def test_nullable_float_parser():
    assert _nullable_float("none") is None
    assert _nullable_float("NULL") is None
    assert _nullable_float("2e-3") == 2e-3
    with pytest.raises(Exception):
        _nullable_float("two")


def test_resolve_addr_precedence(monkeypatch):
    monkeypatch.delenv("NVSCOPE_ADDR", raising=False)
    assert resolve_addr(None) == "127.0.0.1:8770"
    monkeypatch.setenv("NVSCOPE_ADDR", "10.0.0.5:9000")
    assert resolve_addr(None) == "10.0.0.5:9000"
    assert resolve_addr("1.2.3.4:1234") == "1.2.3.4:1234"


def test_split_addr():
    assert _split_addr("localhost:8770") == ("localhost", 8770)
    for bad in ("noport", "host:", "host:abc"):
        with pytest.raises(CliError) as err:
            _split_addr(bad)
        assert err.value.exit_code == 2


def test_parser_covers_all_subcommands():
    parser = build_parser()
    subparsers = next(a for a in parser._actions
                      if isinstance(a, type(parser._actions[-1]))
                      and hasattr(a, "choices") and a.choices)
    assert set(subparsers.choices) == {
        "serve", "calibrate", "approach-curve", "approach", "lift",
        "sweep", "saturation", "sensitivity", "scan", "cross-section",
        "export", "replay",
    }


def test_help_exits_zero(capsys):
    for argv in (["--help"], ["calibrate", "--help"], ["scan", "--help"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_bad_flags_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["scan", "--size", "seven", "--pitch", "1e-8"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["sweep", "--f-start", "1e9"])  # missing --f-stop
    assert exc.value.code == 2
    capsys.readouterr()


def test_flags_validated_before_connecting(capsys):
    # an unroutable address would exit 3; validation must win and exit 2
    code = main(["sweep", "--f-start", "2e9", "--f-stop", "1e9",
                 "--addr", "203.0.113.1:9"])
    assert code == 2
    assert "f-start" in capsys.readouterr().err


def test_connection_refused_exits_3(capsys):
    code = main(["export", "--addr", "127.0.0.1:9"])
    assert code == 3
    assert "error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# live end-to-end workflow (one server, ordered tests)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def live(tmp_path_factory):
    data_root = tmp_path_factory.mktemp("cli-data")
    out = tmp_path_factory.mktemp("cli-out")
    handle = serve({"server": {"port": 0, "ws_port": 0, "seed": 123,
                               "data_root": str(data_root)}})
    state = {
        "addr": f"127.0.0.1:{handle.tcp_port}",
        "data_root": data_root,
        "out": out,
        "ids": {},
    }
    yield state
    handle.stop()


def run_cli(live, *args, expect=0):
    argv = [*args, "--addr", live["addr"], "--out", str(live["out"])]
    code = main(argv)
    assert code == expect, f"nvscope {' '.join(args)} exited {code}"
    return code


def _extract_id(out: str) -> str:
    for line in out.splitlines():
        if "id=" in line:
            return line.split("id=")[1].strip()
    raise AssertionError(f"no envelope id in output:\n{out}")


def test_calibrate_live(live, capsys):
    run_cli(live, "calibrate", "--n-avg", "120", "--n-bins", "400")
    out = capsys.readouterr().out
    env_id = _extract_id(out)
    live["ids"]["calibration"] = env_id
    assert "deflection gain" in out and "resonance" in out
    csv_path = live["out"] / f"calibration_{env_id[:12]}.csv"
    assert csv_path.exists()
    with open(csv_path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["quantity", "value", "std"]
    assert rows[1][0] == "alpha_v_per_m"
    # every value cell round-trips as float
    float(rows[1][1]), float(rows[1][2])


def test_approach_curve_live(live, capsys):
    run_cli(live, "approach-curve", "--n", "24", "--n-avg", "4",
            "--setpoint", "5.0", "--svg")
    out = capsys.readouterr().out
    env_id = _extract_id(out)
    live["ids"]["approach_curve"] = env_id
    assert "setpoint distance" in out
    csv_path = live["out"] / f"approach_curve_{env_id[:12]}.csv"
    with open(csv_path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["distance_m", "amplitude_v", "amplitude_std_v",
                       "f0_hz", "f0_std_hz", "q", "q_std"]
    assert len(rows) == 25
    svg = live["out"] / f"approach_curve_{env_id[:12]}.svg"
    assert ET.parse(svg).getroot().tag.endswith("svg")


def test_sensitivity_live(live, capsys):
    # stationary measurement: allowed only while idle or calibrated
    run_cli(live, "sensitivity", "--n", "120", "--t", "0.2")
    out = capsys.readouterr().out
    env_id = _extract_id(out)
    live["ids"]["sensitivity"] = env_id
    assert "formula sensitivity" in out
    csv_path = live["out"] / f"report_{env_id[:12]}.csv"
    with open(csv_path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["bin_lo_t", "bin_hi_t", "count"]
    assert sum(int(r[2]) for r in rows[1:]) == 120


def test_approach_live(live, capsys):
    run_cli(live, "approach", "--setpoint", "5.0")
    out = capsys.readouterr().out
    assert "tip distance" in out
    with open(live["out"] / "approach_summary.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["quantity", "value"]
    assert [r[0] for r in rows[1:]] == ["tip_distance_m", "shift_hz",
                                        "n_steps"]


def test_lift_live(live, capsys):
    run_cli(live, "lift", "--height", "50e-9")
    out = capsys.readouterr().out
    assert "NV standoff" in out
    assert "65.00 nm" in out  # 50 nm lift + 5 nm contact + 10 nm depth


def test_sweep_live(live, capsys):
    run_cli(live, "sweep", "--f-start", "2.83e9", "--f-stop", "2.91e9",
            "--n-points", "120")
    captured = capsys.readouterr()
    env_id = _extract_id(captured.out)
    live["ids"]["spectrum"] = env_id
    assert "contrast" in captured.out
    assert "point" in captured.err  # streamed progress
    csv_path = live["out"] / f"spectrum_{env_id[:12]}.csv"
    with open(csv_path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["f_hz", "counts_per_s"]
    assert len(rows) == 121


def test_saturation_live(live, capsys):
    run_cli(live, "saturation", "--n", "10", "--t-per-point", "0.02")
    out = capsys.readouterr().out
    env_id = _extract_id(out)
    live["ids"]["saturation"] = env_id
    assert "saturated rate" in out and "saturation power" in out


def test_scan_live(live, capsys):
    run_cli(live, "scan", "--size", "48x2", "--pitch", "20e-9",
            "--noiseless", "--svg")
    captured = capsys.readouterr()
    env_id = _extract_id(captured.out)
    live["ids"]["field_map"] = env_id
    assert "48 x 2 px" in captured.out
    assert "row 1 done" in captured.err and "row 2 done" in captured.err
    csv_path = live["out"] / f"field_map_{env_id[:12]}.csv"
    with open(csv_path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x_m", "y_m", "B_T", "sigma_T", "flag"]
    assert len(rows) == 1 + 48 * 2
    assert all(r[4] == "ok" for r in rows[1:])
    svg = live["out"] / f"field_map_{env_id[:12]}.svg"
    assert ET.parse(svg).getroot().tag.endswith("svg")


def test_cross_section_live(live, capsys):
    map_id = live["ids"]["field_map"]
    run_cli(live, "cross-section", map_id, "--index", "0", "--svg")
    out = capsys.readouterr().out
    env_id = _extract_id(out)
    live["ids"]["cross_section"] = env_id
    # the stripe sample yields fitted walls: the peak table must be there
    assert "fwhm" in out and "amplitude" in out
    assert "±" in out
    csv_path = live["out"] / f"report_{env_id[:12]}.csv"
    with open(csv_path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["position_m", "B_T", "sigma_T"]
    assert len(rows) == 49


def test_export_lists_stored_data(live, capsys):
    run_cli(live, "export")
    out = capsys.readouterr().out
    for env_id in live["ids"].values():
        assert env_id in out


def test_export_then_replay_bit_identical(live, capsys, tmp_path):
    """Every stored envelope renders to byte-identical CSV via the live
    server (export) and offline from raw data (replay)."""
    export_dir = tmp_path / "export"
    replay_dir = tmp_path / "replay"
    for env_id in live["ids"].values():
        code = main(["export", env_id, "--addr", live["addr"],
                     "--out", str(export_dir)])
        assert code == 0
        code = main(["replay", env_id, "--data-root",
                     str(live["data_root"]), "--out", str(replay_dir)])
        assert code == 0
    capsys.readouterr()
    exported = sorted(p.name for p in export_dir.iterdir())
    replayed = sorted(p.name for p in replay_dir.iterdir())
    assert exported == replayed and len(exported) == len(live["ids"])
    for name in exported:
        a = (export_dir / name).read_bytes()
        b = (replay_dir / name).read_bytes()
        assert a == b, f"replay of {name} differs from live export"


def test_live_csv_matches_replay(live, tmp_path, capsys):
    """The CSV written during the live run is already the replay output."""
    replay_dir = tmp_path / "replay2"
    for kind_key in ("calibration", "spectrum", "field_map"):
        env_id = live["ids"][kind_key]
        assert main(["replay", env_id, "--data-root",
                     str(live["data_root"]), "--out", str(replay_dir)]) == 0
        capsys.readouterr()
        name = [p.name for p in replay_dir.iterdir()
                if env_id[:12] in p.name and p.suffix == ".csv"]
        assert len(name) == 1
        live_bytes = (live["out"] / name[0]).read_bytes()
        assert (replay_dir / name[0]).read_bytes() == live_bytes


def test_replay_env_var_data_root(live, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("NVSCOPE_DATA_ROOT", str(live["data_root"]))
    env_id = live["ids"]["calibration"]
    assert main(["replay", env_id, "--out", str(tmp_path)]) == 0
    assert "deflection gain" in capsys.readouterr().out


def test_replay_unknown_id_exits_7(live, tmp_path, capsys):
    code = main(["replay", "0" * 64, "--data-root", str(live["data_root"]),
                 "--out", str(tmp_path)])
    assert code == 7
    capsys.readouterr()


def test_export_unknown_id_exits_7(live, capsys):
    code = main(["export", "0" * 64, "--addr", live["addr"]])
    assert code == 7
    assert "not-found" in capsys.readouterr().err


def test_illegal_state_exits_4(live, capsys):
    # approach-curve needs the calibrated phase; the tip is approached
    code = main(["approach-curve", "--addr", live["addr"],
                 "--out", str(live["out"])])
    assert code == 4
    assert "illegal-state" in capsys.readouterr().err


def test_cross_section_bad_index_exits_2(live, capsys):
    code = main(["cross-section", live["ids"]["field_map"], "--index",
                 "99", "--addr", live["addr"], "--out", str(live["out"])])
    assert code == 2
    assert "validation" in capsys.readouterr().err


def test_same_seed_reproduces_csv(tmp_path, capsys):
    """Same seed + same command sequence => identical rendered data."""
    payloads = []
    for run in ("a", "b"):
        root = tmp_path / f"data-{run}"
        out = tmp_path / f"out-{run}"
        handle = serve({"server": {"port": 0, "ws_port": 0, "seed": 9,
                                   "data_root": str(root)}})
        try:
            code = main(["calibrate", "--n-avg", "40", "--n-bins", "200",
                         "--addr", f"127.0.0.1:{handle.tcp_port}",
                         "--out", str(out)])
            assert code == 0
        finally:
            handle.stop()
        capsys.readouterr()
        files = sorted(out.glob("calibration_*.csv"))
        assert len(files) == 1
        payloads.append(files[0].read_bytes())
    assert payloads[0] == payloads[1]


def test_serve_subprocess_runs_and_stops(tmp_path):
    proc = subprocess.Popen(
        [sys.executable, "-m", "nvscope.cli", "serve", "--port", "0",
         "--ws-port", "0", "--seed", "1", "--data-root",
         str(tmp_path / "data")],
        stderr=subprocess.PIPE, text=True)
    try:
        line = proc.stderr.readline()
        assert "nvscope server on tcp" in line
        port = int(line.split("tcp")[1].split(",")[0].strip())
        import json
        import socket

        with socket.create_connection(("127.0.0.1", port), timeout=10) as s:
            s.sendall(b'{"id": 1, "verb": "get_state", "params": {}}\n')
            reply = json.loads(s.makefile().readline())
        assert reply["ok"] and reply["result"]["state"]["phase"] == "idle"
    finally:
        proc.send_signal(signal.SIGINT)
        assert proc.wait(timeout=30) == 0
