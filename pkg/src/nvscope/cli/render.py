"""Render stored envelopes to aligned-text summaries, CSV, and SVG.

Both the live commands (after a job completes, via load_data) and the
offline `replay`/`export` paths feed the same Envelope objects through
these functions, so re-rendering stored raw data reproduces the original
CSV byte for byte.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..datastore import Envelope, field_map_from_envelope
from .format import grid_table, kv_table, si_format, si_pair

__all__ = ["Rendering", "render_envelope", "peak_rows"]


@dataclass
class Rendering:
    title: str
    text: str
    csv_path: Path
    svg_path: Path | None = None


def _repr_cell(value) -> str:
    """Canonical CSV cell: shortest round-trip float repr, else str."""
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (np.floating,)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_repr_cell(cell) for cell in row])


def _flt(value) -> float:
    return math.nan if value is None else float(value)


# -- per-kind renderers ---------------------------------------------------------


def _render_calibration(payload: dict, base: Path, svg: bool) -> Rendering:
    order = [
        ("alpha_v_per_m", payload["alpha"], payload["alpha_std"]),
        ("f_res_hz", payload["f_res"], payload["f_res_std"]),
        ("q", payload["q"], payload["q_std"]),
        ("m_eff_kg", payload["m_eff"], None),
        ("temperature_k", payload["temperature"], None),
        ("s_en_v2_per_hz", payload["s_en"], None),
        ("n_avg", payload["n_avg"], None),
        ("span_hz", payload["span"], None),
        ("n_bins", payload["n_bins"], None),
    ]
    csv_path = base.with_suffix(".csv")
    _write_csv(csv_path, ["quantity", "value", "std"],
               [(name, value, std) for name, value, std in order])
    text = kv_table([
        ("deflection gain", si_pair(payload["alpha"], payload["alpha_std"],
                                    "V/m")),
        ("resonance", si_pair(payload["f_res"], payload["f_res_std"], "Hz")),
        ("quality factor", si_pair(payload["q"], payload["q_std"])),
        ("effective mass", si_format(payload["m_eff"] * 1e3, "g")),
        ("temperature", si_format(payload["temperature"], "K")),
        ("amplifier noise", si_format(payload["s_en"], "V²/Hz")),
        ("averages", str(payload["n_avg"])),
    ])
    return Rendering("tuning-fork calibration", text, csv_path)


def _render_approach_curve(payload: dict, base: Path, svg: bool) -> Rendering:
    columns = ["distances", "amplitude", "amplitude_std",
               "f0", "f0_std", "q", "q_std"]
    arrays = [np.asarray(payload[c], float) for c in columns]
    csv_path = base.with_suffix(".csv")
    _write_csv(csv_path,
               ["distance_m", "amplitude_v", "amplitude_std_v",
                "f0_hz", "f0_std_hz", "q", "q_std"],
               [tuple(float(a[i]) for a in arrays)
                for i in range(len(arrays[0]))])
    distances = arrays[0]
    shift_total = float(arrays[3][-1] - arrays[3][0])
    rows = [
        ("points", str(len(distances))),
        ("span", f"{si_format(distances[0], 'm')} .. "
                 f"{si_format(distances[-1], 'm')}"),
        ("total shift", si_format(shift_total, "Hz")),
        ("safety abort", str(bool(payload["aborted"])).lower()),
    ]
    sug = payload.get("pll_suggestion")
    if sug:
        rows += [
            ("setpoint shift", si_format(sug["setpoint_shift"], "Hz")),
            ("setpoint distance", si_format(sug["setpoint_distance"], "m")),
            ("local slope", si_format(sug["slope"], "Hz/m")),
            ("suggested kp", si_format(sug["kp"], "m/Hz")),
            ("suggested ki", si_format(sug["ki"], "m/(Hz s)")),
        ]
    svg_path = None
    if svg:
        from . import plots
        svg_path = base.with_suffix(".svg")
        plots.plot_approach_curve(payload, svg_path)
    return Rendering("approach curve", kv_table(rows), csv_path, svg_path)


def _render_spectrum(payload: dict, base: Path, svg: bool) -> Rendering:
    freqs = np.asarray(payload["freqs"], float)
    counts = np.asarray(payload["counts"], float)
    csv_path = base.with_suffix(".csv")
    _write_csv(csv_path, ["f_hz", "counts_per_s"],
               zip(freqs.tolist(), counts.tolist()))
    fit = payload.get("fit")
    if fit:
        rows = [
            ("dip f-", si_pair(fit["f_minus_hz"], fit["f_minus_std_hz"],
                               "Hz")),
            ("dip f+", si_pair(fit["f_plus_hz"], fit["f_plus_std_hz"],
                               "Hz")),
            ("contrast", si_pair(fit["contrast"], fit["contrast_std"])),
            ("linewidth", si_pair(fit["linewidth_hz"],
                                  fit["linewidth_std_hz"], "Hz")),
            ("B parallel", si_pair(fit["b_parallel_t"],
                                   fit["b_parallel_std_t"], "T")),
            ("single dip", str(bool(fit["single_dip"])).lower()),
            ("reduced chi2", si_format(fit["chi2_reduced"])),
        ]
        text = kv_table(rows)
    else:
        text = kv_table([("fit", "failed (raw spectrum stored)")])
    svg_path = None
    if svg:
        from . import plots
        svg_path = base.with_suffix(".svg")
        plots.plot_spectrum(payload, svg_path)
    return Rendering("ODMR sweep", text, csv_path, svg_path)


def _render_saturation(payload: dict, base: Path, svg: bool) -> Rendering:
    powers = np.asarray(payload["powers"], float)
    rates = np.asarray(payload["rates"], float)
    stds = np.asarray(payload["rate_std"], float)
    csv_path = base.with_suffix(".csv")
    _write_csv(csv_path, ["power_w", "rate_per_s", "rate_std_per_s"],
               zip(powers.tolist(), rates.tolist(), stds.tolist()))
    text = kv_table([
        ("saturated rate", si_pair(payload["r_inf"], payload["r_inf_std"],
                                   "counts/s")),
        ("saturation power", si_pair(payload["p_sat"], payload["p_sat_std"],
                                     "W")),
        ("background slope", si_format(payload["bg_slope"], "counts/s/W")),
        ("dark rate", si_format(payload["dark_rate"], "counts/s")),
    ])
    svg_path = None
    if svg:
        from . import plots
        svg_path = base.with_suffix(".svg")
        plots.plot_saturation(payload, svg_path)
    return Rendering("NV saturation", text, csv_path, svg_path)


def _render_sensitivity(payload: dict, base: Path, svg: bool) -> Rendering:
    edges = np.asarray(payload["bin_edges"], float)
    counts = np.asarray(payload["bin_counts"])
    csv_path = base.with_suffix(".csv")
    _write_csv(csv_path, ["bin_lo_t", "bin_hi_t", "count"],
               [(float(edges[i]), float(edges[i + 1]), int(counts[i]))
                for i in range(len(counts))])
    text = kv_table([
        ("formula sensitivity",
         si_format(payload["sigma_formula"], "T/√Hz")),
        ("empirical spread", si_pair(payload["sigma_empirical"],
                                     payload["sigma_empirical_std"], "T")),
        ("measurements", str(payload["n_meas"])),
        ("duration each", si_format(payload["t_meas"], "s")),
        ("degraded", str(bool(payload["degraded"])).lower()),
    ])
    svg_path = None
    if svg:
        from . import plots
        svg_path = base.with_suffix(".svg")
        plots.plot_sensitivity(payload, svg_path)
    return Rendering("sensitivity run", text, csv_path, svg_path)


def peak_rows(peaks: list[dict]) -> list[list[str]]:
    """Table cells for fitted section peaks.

    These exact strings are the formatting contract the operator console
    mirrors: each cell is si_pair/si_format of the wire value.
    """
    rows = []
    for i, peak in enumerate(peaks):
        rows.append([
            str(i),
            si_pair(_flt(peak["center_m"]), _flt(peak["center_std_m"]), "m"),
            si_pair(_flt(peak["sigma_m"]), _flt(peak["sigma_std_m"]), "m"),
            si_pair(_flt(peak["fwhm_m"]), _flt(peak["fwhm_std_m"]), "m"),
            si_pair(_flt(peak["amplitude_t"]), _flt(peak["amplitude_std_t"]),
                    "T"),
        ])
    return rows


def _render_cross_section(payload: dict, base: Path, svg: bool) -> Rendering:
    positions = np.asarray(payload["positions_m"], float)
    values = np.asarray(payload["b_t"], float)
    sigmas = np.asarray(payload["sigma_b_t"], float)
    csv_path = base.with_suffix(".csv")
    _write_csv(csv_path, ["position_m", "B_T", "sigma_T"],
               zip(positions.tolist(), values.tolist(), sigmas.tolist()))
    head = kv_table([
        ("axis", payload["axis"]),
        ("line index", str(payload["index"])),
        ("line coordinate", si_format(payload["line_coord_m"], "m")),
        ("points", str(len(positions))),
        ("peaks", str(len(payload["peaks"]))),
    ])
    if payload["peaks"]:
        head += "\n\n" + grid_table(
            ["#", "center", "sigma", "fwhm", "amplitude"],
            peak_rows(payload["peaks"]))
    svg_path = None
    if svg:
        from . import plots
        svg_path = base.with_suffix(".svg")
        plots.plot_cross_section(payload, svg_path)
    return Rendering("cross-section", head, csv_path, svg_path)


def _render_field_map(env: Envelope, base: Path, svg: bool) -> Rendering:
    fmap = field_map_from_envelope(env)
    csv_path = base.with_suffix(".csv")
    fmap.to_csv(csv_path)
    flags = fmap.flags
    n_ok = int(np.count_nonzero(flags == 0))
    rows = [
        ("grid", f"{fmap.config.nx} x {fmap.config.ny} px"),
        ("pitch", si_format(fmap.config.pixel_pitch, "m")),
        ("extent", f"{si_format(fmap.config.extent[0], 'm')} x "
                   f"{si_format(fmap.config.extent[1], 'm')}"),
        ("lift height", si_format(fmap.config.lift_height, "m")),
        ("rows completed", f"{fmap.rows_completed}/{fmap.config.ny}"),
        ("aborted", str(bool(fmap.aborted)).lower()),
        ("valid pixels", f"{n_ok}/{flags.size}"),
    ]
    valid = fmap.valid_mask
    if np.any(valid):
        rows.append(("B range",
                     f"{si_format(float(np.nanmin(fmap.b[valid])), 'T')} .. "
                     f"{si_format(float(np.nanmax(fmap.b[valid])), 'T')}"))
    svg_path = None
    if svg:
        from . import plots
        svg_path = base.with_suffix(".svg")
        plots.plot_field_map(fmap, svg_path)
    return Rendering("stray-field map", kv_table(rows), csv_path, svg_path)


def render_envelope(env: Envelope, env_id: str, out_dir: Path, *,
                    svg: bool = False) -> Rendering:
    """Write `<kind>_<id12>.csv` (and optionally .svg) under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = out_dir / f"{env.kind}_{env_id[:12]}"
    if env.kind == "calibration":
        return _render_calibration(env.payload, base, svg)
    if env.kind == "approach_curve":
        return _render_approach_curve(env.payload, base, svg)
    if env.kind == "spectrum":
        return _render_spectrum(env.payload, base, svg)
    if env.kind == "field_map":
        return _render_field_map(env, base, svg)
    if env.kind == "report":
        report_type = env.payload.get("report_type")
        if report_type == "saturation":
            return _render_saturation(env.payload, base, svg)
        if report_type == "sensitivity":
            return _render_sensitivity(env.payload, base, svg)
        if report_type == "cross_section":
            return _render_cross_section(env.payload, base, svg)
        raise ValueError(f"unknown report_type {report_type!r}")
    raise ValueError(f"no renderer for envelope kind {env.kind!r}")
