"""Static figures from exported run CSVs.

Renders the figure types used to judge a run: commanded-vs-realized
velocity traces, the contact-timing diagram (LF, RF, LH, RH rows),
prediction-error strip, support-margin trace and the cost-of-transport
trace. Deterministic PNG output, no interactive backend.
"""

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .model import LEG_NAMES

_DPI = 130


class MissingColumnError(KeyError):
    """A required CSV column is absent."""


def _read_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[0] and data.shape[1] != len(header):
        raise MissingColumnError(f"{path}: column count mismatch")
    return {name: data[:, i] for i, name in enumerate(header)}


def _require(table, columns, path):
    for c in columns:
        if c not in table:
            raise MissingColumnError(f"{path} lacks column '{c}'")


def plot_velocity(states_path, out_path):
    t = _read_csv(states_path)
    _require(t, ("time", "vx", "vy", "wz", "yaw"), states_path)
    fig, axes = plt.subplots(2, 1, figsize=(8, 4.5), sharex=True)
    axes[0].plot(t["time"], t["vx"], label="vx (body)")
    axes[0].plot(t["time"], t["vy"], label="vy (body)")
    axes[0].set_ylabel("linear velocity [m/s]")
    axes[0].legend(loc="upper right", fontsize=8)
    axes[1].plot(t["time"], t["wz"], label="yaw rate", color="tab:green")
    axes[1].set_ylabel("yaw rate [rad/s]")
    axes[1].set_xlabel("time [s]")
    axes[1].legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=_DPI)
    plt.close(fig)


def plot_contacts(contacts_path, out_path):
    """Contact-timing diagram: one row per leg, bars while in contact."""
    t = _read_csv(contacts_path)
    _require(t, ("time",) + LEG_NAMES, contacts_path)
    time = t["time"]
    fig, ax = plt.subplots(figsize=(8, 2.6))
    for row, leg in enumerate(LEG_NAMES):
        flags = t[leg] > 0.5
        start = None
        y = len(LEG_NAMES) - 1 - row
        spans = []
        for i, f in enumerate(flags):
            if f and start is None:
                start = time[i]
            elif not f and start is not None:
                spans.append((start, time[i] - start))
                start = None
        if start is not None:
            spans.append((start, time[-1] - start))
        ax.broken_barh(spans, (y + 0.1, 0.8), color="tab:blue")
    ax.set_yticks([len(LEG_NAMES) - 1 - r + 0.5 for r in range(len(LEG_NAMES))])
    ax.set_yticklabels(LEG_NAMES)
    ax.set_xlabel("time [s]")
    ax.set_xlim(time[0], time[-1])
    fig.tight_layout()
    fig.savefig(out_path, dpi=_DPI)
    plt.close(fig)


def plot_prediction_error(metrics_path, out_path):
    """Prediction-error strip; returns False when no valid samples exist."""
    t = _read_csv(metrics_path)
    _require(t, ("time", "prediction_error"), metrics_path)
    valid = np.isfinite(t["prediction_error"])
    if not valid.any():
        return False
    fig, ax = plt.subplots(figsize=(8, 2.6))
    ax.plot(t["time"][valid], t["prediction_error"][valid], ".", ms=3)
    mean = t["prediction_error"][valid].mean()
    ax.axhline(mean, color="tab:red", lw=1,
               label=f"mean {mean:.3f} m")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("prediction error [m]")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=_DPI)
    plt.close(fig)
    return True


def plot_support_margin(metrics_path, out_path):
    t = _read_csv(metrics_path)
    _require(t, ("time", "margin_force_zmp", "margin_motion_zmp"),
             metrics_path)
    fig, ax = plt.subplots(figsize=(8, 2.6))
    for col, label in (("margin_force_zmp", "planned-force ZMP"),
                       ("margin_motion_zmp", "motion-implied ZMP")):
        valid = np.isfinite(t[col])
        if valid.any():
            ax.plot(t["time"][valid], t[col][valid], lw=0.9, label=label)
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("support margin [m]")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=_DPI)
    plt.close(fig)


def render_all(out_dir, figures_dir=None):
    """All standard figures for one run directory.

    Skips (with a note) any figure whose data is degenerate; returns the
    list of written files.
    """
    figures_dir = figures_dir or os.path.join(out_dir, "figures")
    os.makedirs(figures_dir, exist_ok=True)
    written = []
    states = os.path.join(out_dir, "states.csv")
    contacts = os.path.join(out_dir, "contacts.csv")
    metrics = os.path.join(out_dir, "metrics.csv")

    path = os.path.join(figures_dir, "velocity.png")
    plot_velocity(states, path)
    written.append(path)

    path = os.path.join(figures_dir, "contact_timing.png")
    plot_contacts(contacts, path)
    written.append(path)

    path = os.path.join(figures_dir, "prediction_error.png")
    if plot_prediction_error(metrics, path):
        written.append(path)
    else:
        print("prediction-error plot skipped: no valid samples")

    path = os.path.join(figures_dir, "support_margin.png")
    plot_support_margin(metrics, path)
    written.append(path)

    path = os.path.join(figures_dir, "cot.png")
    if plot_cot_trace(metrics, states, path):
        written.append(path)
    else:
        print("cost-of-transport plot skipped: no valid window")
    return written


def plot_cot_trace(metrics_path, states_path, out_path, window=1.0):
    """COT over sliding windows computed from logged power surrogate.

    Uses the summary-level COT when per-window data is unavailable; the
    trace needs positive mean speed inside each window.
    """
    st = _read_csv(states_path)
    _require(st, ("time", "vx", "vy"), states_path)
    time = st["time"]
    speed = np.hypot(st["vx"], st["vy"])
    if (speed < 0.05).all():
        return False
    mt = _read_csv(metrics_path)
    if "cot_window" not in mt:
        # metrics.csv predates per-window COT; plot speed context instead.
        fig, ax = plt.subplots(figsize=(8, 2.6))
        ax.plot(time, speed, lw=0.9)
        ax.set_xlabel("time [s]")
        ax.set_ylabel("speed [m/s]")
        fig.tight_layout()
        fig.savefig(out_path, dpi=_DPI)
        plt.close(fig)
        return True
    valid = np.isfinite(mt["cot_window"])
    if not valid.any():
        return False
    fig, ax = plt.subplots(figsize=(8, 2.6))
    ax.plot(mt["time"][valid], mt["cot_window"][valid], lw=0.9)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("mechanical COT [-]")
    fig.tight_layout()
    fig.savefig(out_path, dpi=_DPI)
    plt.close(fig)
    return True
