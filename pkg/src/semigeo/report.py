"""Figures for run and refinement outputs, rendered next to the CSV files.

Operates purely on the files a run leaves behind (diagnostics.csv,
solver_stats.csv, *.sgf dumps, refine_table.csv), so it can be pointed at
any finished output directory, including one produced on another machine.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigError
from .fieldio import load_field_values

_DPI = 130


def _read_columns(path):
    """CSV -> dict of float arrays; blank cells become NaN."""
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    def cell(v):
        try:
            return float(v)
        except (TypeError, ValueError):
            return np.nan

    return {key: np.array([cell(r[key]) for r in rows]) for key in rows[0]}


def _save(fig, outdir, name, written):
    path = os.path.join(outdir, name)
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    written.append(path)


def _timeseries(outdir, cols, written):
    t = cols["t"]
    fig, axes = plt.subplots(2, 2, figsize=(9.5, 7), sharex=True)

    ax = axes[0, 0]
    ax.plot(t, cols["l2_energy"], color="tab:blue")
    ax.set_ylabel("kinetic energy")

    ax = axes[0, 1]
    ax.plot(t, cols["hk_norm"], label="state", color="tab:blue")
    ax.plot(t, cols["psi_hk_norm"], label="potential", color="tab:orange")
    ax.set_ylabel("Sobolev norm")
    ax.legend(frameon=False)

    ax = axes[1, 0]
    ax.plot(t, cols["mu"], color="tab:red")
    ax.axhline(1.0, color="k", linestyle="--", linewidth=0.8)
    ax.set_ylabel("stability eigenvalue")
    ax.set_xlabel("t")

    ax = axes[1, 1]
    ax.semilogy(t, np.maximum(cols["theta_max"], 1e-300), color="tab:green")
    ax.set_ylabel("monitor functional (running max)")
    ax.set_xlabel("t")

    fig.tight_layout()
    _save(fig, outdir, "timeseries.png", written)


def _solver(outdir, diag, stats, written):
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(8, 6.2), sharex=True)
    if stats:
        top.step(stats["t"], stats["iterations"], where="post",
                 color="tab:blue")
        top.set_ylabel("solver iterations")
    bottom.set_ylabel("residuals")
    bottom.set_xlabel("t")
    series = [("residual", stats, "solver", "tab:blue"),
              ("curl_residual", diag, "curl", "tab:red"),
              ("alpha1", diag, "alpha1", "tab:green"),
              ("alpha2", diag, "alpha2", "tab:purple")]
    for key, cols, label, color in series:
        if cols and np.any(np.abs(cols[key]) > 0):
            bottom.semilogy(cols["t"], np.abs(cols[key]), label=label,
                            color=color)
    if bottom.get_legend_handles_labels()[0]:
        bottom.legend(frameon=False)
    fig.tight_layout()
    _save(fig, outdir, "solver.png", written)


def _field_figure(outdir, name, png, written):
    vals = load_field_values(os.path.join(outdir, name))
    ncomp = vals.shape[2]
    fig, axes = plt.subplots(1, ncomp, figsize=(4.6 * ncomp, 4),
                             squeeze=False)
    for c in range(ncomp):
        ax = axes[0, c]
        im = ax.imshow(vals[:, :, c].T, origin="lower", cmap="RdBu_r")
        ax.set_title(f"component {c + 1}" if ncomp > 1 else name[:-4])
        fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    _save(fig, outdir, png, written)


def _refine(outdir, cols, written):
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    level = cols["level"]
    diff = cols["terminal_diff"]
    ok = np.isfinite(diff) & (diff > 0)
    ax.semilogy(level[ok], diff[ok], "o-", color="tab:blue")
    for lv, d, r in zip(level, diff, cols["ratio"]):
        if np.isfinite(r):
            ax.annotate(f"x{r:.2f}", (lv, d), textcoords="offset points",
                        xytext=(6, 4), fontsize=9)
    ax.set_xlabel("refinement level")
    ax.set_ylabel("terminal-state difference")
    ax.set_title("dyadic self-convergence")
    fig.tight_layout()
    _save(fig, outdir, "refine.png", written)


def render_report(outdir) -> list:
    """Render every figure the directory's outputs support; returns paths."""
    if not os.path.isdir(outdir):
        raise ConfigError(f"{outdir} is not an output directory")
    written = []

    diag_path = os.path.join(outdir, "diagnostics.csv")
    diag = _read_columns(diag_path) if os.path.exists(diag_path) else {}
    stats_path = os.path.join(outdir, "solver_stats.csv")
    stats = _read_columns(stats_path) if os.path.exists(stats_path) else {}
    if diag:
        _timeseries(outdir, diag, written)
    if diag or stats:
        _solver(outdir, diag, stats, written)
    if os.path.exists(os.path.join(outdir, "final_state.sgf")):
        _field_figure(outdir, "final_state.sgf", "final_state.png", written)
    if os.path.exists(os.path.join(outdir, "mu_field.sgf")):
        _field_figure(outdir, "mu_field.sgf", "mu_field.png", written)

    table = os.path.join(outdir, "refine_table.csv")
    if os.path.exists(table):
        cols = _read_columns(table)
        if cols and np.any(np.isfinite(cols["terminal_diff"])):
            _refine(outdir, cols, written)
        # each member run keeps its own artifacts one directory down
        for name in sorted(os.listdir(outdir)):
            sub = os.path.join(outdir, name)
            if name.startswith("level_") and os.path.isdir(sub):
                written += render_report(sub)

    if not written:
        raise ConfigError(f"{outdir}: no run outputs to render")
    return written
