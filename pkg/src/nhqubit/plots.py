"""SVG rendering of run artifacts.

Pure post-processing: every plot is drawn from the CSV files a run wrote,
never from in-memory state, so the numeric pipeline has no rendering
dependency.  Output is deterministic (fixed hash salt, no date metadata).
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "nhqubit"

import matplotlib.pyplot as plt

from .artifacts import read_csv


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def render(experiment: str, out: Path) -> None:
    out = Path(out)
    {
        "spectrum": _plot_spectrum,
        "ensemble": _plot_ensemble,
        "compare": _plot_compare,
        "sde": _plot_sde,
        "optimal-path": _plot_path,
        "phase-portrait": _plot_portrait,
        "povm-check": lambda _: None,
    }[experiment](out)


def _plot_spectrum(out):
    data = read_csv(out / "spectrum.csv")
    fig, (ax_re, ax_im) = plt.subplots(1, 2, figsize=(9, 3.5), constrained_layout=True)
    for k in range(1, 5):
        ax_re.plot(data["omega"], data[f"re_l{k}"], lw=1)
        ax_im.plot(data["omega"], data[f"im_l{k}"], lw=1)
    ax_re.set(xlabel="omega (MHz)", ylabel="Re lambda (MHz)")
    ax_im.set(xlabel="omega (MHz)", ylabel="Im lambda (MHz)")
    _save(fig, out / "spectrum.svg")


def _plot_ensemble(out):
    data = read_csv(out / "ensemble.csv")
    fig, ax = plt.subplots(figsize=(5.5, 3.5), constrained_layout=True)
    for key, label in (("Pf_mean", "P_f"), ("Pe_mean", "P_e"), ("Pg_mean", "P_g")):
        ax.plot(data["t"], data[key], label=label)
    ax.plot(data["t"], data["Pf_norm"], "--", label="P_f (survivors, normalized)")
    ax.set(xlabel="t (us)", ylabel="population")
    ax.legend()
    _save(fig, out / "ensemble.svg")


def _plot_compare(out):
    data = read_csv(out / "compare.csv")
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5), constrained_layout=True, sharey=True)
    for ax, axis in zip(axes, ("x", "y")):
        ax.plot(data["t"], data[f"pf_traj_{axis}"], label="trajectories")
        ax.plot(data["t"], data[f"pf_liou_{axis}"], ":", label="Liouvillian")
        ax.set(xlabel="t (us)", title=f"{axis}-axis drive")
    axes[0].set_ylabel("normalized P_f")
    axes[0].legend()
    _save(fig, out / "compare.svg")


def _plot_sde(out):
    fig, ax = plt.subplots(figsize=(5.5, 3.5), constrained_layout=True)
    data = read_csv(out / "ensemble.csv")
    ax.plot(data["t"], data["Pf_norm"], "k", lw=2, label="ensemble mean")
    for path in sorted(out.glob("trajectory_*.csv")):
        traj = read_csv(path)
        ax.plot(traj["t"], 0.5 * (1.0 + traj["z"]), alpha=0.4, lw=0.8)
    ax.set(xlabel="t (us)", ylabel="P_f")
    ax.legend()
    _save(fig, out / "trajectories.svg")


def _plot_path(out):
    data = read_csv(out / "path.csv")
    fig, ax = plt.subplots(figsize=(5.5, 3.5), constrained_layout=True)
    for key, style in (("x", "--r"), ("y", "-.b"), ("z", ":g")):
        ax.plot(data["t"], data[key], style, label=key)
    mean_path = out / "postselected_mean.csv"
    if mean_path.exists():
        mean = read_csv(mean_path)
        for key in ("x", "y", "z"):
            ax.plot(mean["t"], mean[f"{key}_mean"], "k", lw=0.8, alpha=0.6)
    ax.set(xlabel="t (us)", ylabel="Bloch components")
    ax.legend()
    _save(fig, out / "path.svg")


def _plot_portrait(out):
    data = read_csv(out / "portrait.csv")
    fig, ax = plt.subplots(figsize=(5.5, 4), constrained_layout=True)
    for energy in sorted(set(data["E"])):
        sel = data["E"] == energy
        ax.plot(data["theta_b"][sel], data["p_branch1"][sel], lw=1)
        ax.plot(data["theta_b"][sel], data["p_branch2"][sel], lw=1)
    ax.set(xlabel="theta_b (rad)", ylabel="p")
    _save(fig, out / "portrait.svg")
