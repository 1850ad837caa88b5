"""Self-contained SVG plots for stored envelopes (no display needed)."""
from __future__ import annotations

import math

import numpy as np

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

__all__ = [
    "plot_approach_curve",
    "plot_spectrum",
    "plot_saturation",
    "plot_sensitivity",
    "plot_cross_section",
    "plot_field_map",
]


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_approach_curve(payload: dict, path) -> None:
    d_nm = np.asarray(payload["distances"], float) * 1e9
    fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
    ax0.errorbar(d_nm, np.asarray(payload["amplitude"], float) * 1e9,
                 yerr=np.asarray(payload["amplitude_std"], float) * 1e9,
                 fmt=".-", lw=1, ms=4)
    ax0.set_ylabel("oscillation amplitude (nm)")
    shift = np.asarray(payload["f0"], float) - float(payload["f0"][0])
    ax1.errorbar(d_nm, shift, yerr=np.asarray(payload["f0_std"], float),
                 fmt=".-", lw=1, ms=4, color="tab:orange")
    ax1.set_ylabel("frequency shift (Hz)")
    ax1.set_xlabel("tip-sample distance (nm)")
    sug = payload.get("pll_suggestion")
    if sug and sug.get("setpoint_distance") is not None:
        for ax in (ax0, ax1):
            ax.axvline(sug["setpoint_distance"] * 1e9,
                       color="gray", ls="--", lw=1)
    ax0.set_title("approach curve")
    _save(fig, path)


def plot_spectrum(payload: dict, path) -> None:
    f_ghz = np.asarray(payload["freqs"], float) / 1e9
    counts = np.asarray(payload["counts"], float)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(f_ghz, counts, ".-", lw=1, ms=4)
    fit = payload.get("fit")
    if fit:
        for key, color in (("f_minus_hz", "tab:red"),
                           ("f_plus_hz", "tab:green")):
            value = fit.get(key)
            if value is not None and not (isinstance(value, float)
                                          and math.isnan(value)):
                ax.axvline(value / 1e9, color=color, ls="--", lw=1)
    ax.set_xlabel("microwave frequency (GHz)")
    ax.set_ylabel("photon rate (counts/s)")
    ax.set_title("ODMR sweep")
    _save(fig, path)


def plot_saturation(payload: dict, path) -> None:
    p_uw = np.asarray(payload["powers"], float) * 1e6
    rates = np.asarray(payload["rates"], float) / 1e3
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(p_uw, rates,
                yerr=np.asarray(payload["rate_std"], float) / 1e3,
                fmt=".", ms=5, label="measured")
    p_fit = np.linspace(0.0, float(np.max(p_uw)) * 1e-6, 200)
    model = (payload["r_inf"] * p_fit / (p_fit + payload["p_sat"])
             + payload["bg_slope"] * p_fit + payload["dark_rate"])
    ax.plot(p_fit * 1e6, model / 1e3, "-", lw=1.2, label="fit")
    ax.set_xlabel("optical power (µW)")
    ax.set_ylabel("photon rate (kcounts/s)")
    ax.set_title("saturation curve")
    ax.legend()
    _save(fig, path)


def plot_sensitivity(payload: dict, path) -> None:
    edges = np.asarray(payload["bin_edges"], float) * 1e6
    counts = np.asarray(payload["bin_counts"], float)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.stairs(counts, edges, fill=True, alpha=0.7)
    ax.set_xlabel("field estimate (µT)")
    ax.set_ylabel("occurrences")
    ax.set_title(f"field histogram, {payload['n_meas']} measurements")
    _save(fig, path)


def _gaussian(x, amplitude, center, sigma, offset):
    return amplitude * np.exp(-0.5 * ((x - center) / sigma) ** 2) + offset


def plot_cross_section(payload: dict, path) -> None:
    pos_um = np.asarray(payload["positions_m"], float) * 1e6
    b_ut = np.asarray(payload["b_t"], float) * 1e6
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(pos_um, b_ut,
                yerr=np.asarray(payload["sigma_b_t"], float) * 1e6,
                fmt=".", ms=4, label="profile")
    baseline = float(np.median(np.asarray(payload["b_t"], float)))
    pos_m = np.asarray(payload["positions_m"], float)
    for peak in payload.get("peaks", []):
        xs = np.linspace(pos_m.min(), pos_m.max(), 400)
        curve = _gaussian(xs, peak["amplitude_t"], peak["center_m"],
                          peak["sigma_m"], baseline)
        ax.plot(xs * 1e6, curve * 1e6, "-", lw=1.2)
    ax.set_xlabel("position (µm)")
    ax.set_ylabel("B (µT)")
    axis, index = payload.get("axis", "x"), payload.get("index", 0)
    ax.set_title(f"cross-section along {axis}, line {index}")
    ax.legend()
    _save(fig, path)


def plot_field_map(fmap, path) -> None:
    extent = [fmap.x_coords[0] * 1e6, fmap.x_coords[-1] * 1e6,
              fmap.y_coords[0] * 1e6, fmap.y_coords[-1] * 1e6]
    fig, ax = plt.subplots(figsize=(6, 5))
    image = ax.imshow(fmap.b * 1e6, origin="lower", extent=extent,
                      aspect="equal", cmap="RdBu_r")
    fig.colorbar(image, ax=ax, label="B (µT)")
    ax.set_xlabel("x (µm)")
    ax.set_ylabel("y (µm)")
    ax.set_title("stray-field map")
    _save(fig, path)
