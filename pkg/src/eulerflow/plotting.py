"""Figures written next to the text outputs of ``fit``, ``eval`` and ``track``."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
}
# keeps PNG output byte-stable across runs
_SAVE_KW = {"metadata": {"Software": None}}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def plot_history(history, path) -> Path:
    """Objective per epoch, split into Chamfer horizons and the cycle term."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = [e.epoch for e in history.epochs]
        ax.plot(epochs, [e.total for e in history.epochs], color="k", lw=1.5, label="total")
        keys = sorted({k for e in history.epochs for k in e.chamfer_terms})
        for k in keys:
            ax.plot(epochs, [e.chamfer_terms.get(k, np.nan) for e in history.epochs], lw=0.8, label=f"chamfer k={k:+d}")
        if any(e.cycle_term for e in history.epochs):
            ax.plot(epochs, [e.cycle_term for e in history.epochs], lw=0.8, ls="--", label="cycle (weighted)")
        ax.axvline(history.best_epoch, color="0.5", lw=0.8, ls=":")
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("objective")
        ax.legend(ncol=2)
        return _save(fig, path)


def plot_report(report, path) -> Path:
    """Per-class normalised dynamic error bars with the EPE summary in the title."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        classes = sorted(report.per_class_dynamic_normalized)
        values = [report.per_class_dynamic_normalized[c] for c in classes]
        ax.bar([str(c) for c in classes], values, color="tab:blue")
        if report.mean_dynamic_normalized is not None:
            ax.axhline(report.mean_dynamic_normalized, color="k", ls="--", lw=1, label="class mean")
            ax.legend()
        ax.set_xlabel("class id")
        ax.set_ylabel("dynamic EPE / mean speed")

        def fmt(v):
            return "n/a" if v is None else f"{v:.4f}"

        ax.set_title(
            f"EPE mean {fmt(report.mean_epe)} m, static {fmt(report.static_epe)} m, "
            f"dynamic {fmt(report.dynamic_epe)} m"
        )
        return _save(fig, path)


def plot_tracks(tracks, path, reference: Optional[Sequence[np.ndarray]] = None) -> Path:
    """Top-down view of tracked points, optionally against reference paths."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, tr in enumerate(tracks):
            pos = tr.positions
            ax.plot(pos[:, 0], pos[:, 1], "-o", ms=2, lw=1, label="tracked" if i == 0 else None)
            ax.plot(pos[0, 0], pos[0, 1], "k^", ms=5)
        if reference is not None:
            for i, ref in enumerate(reference):
                ref = np.asarray(ref)
                ax.plot(ref[:, 0], ref[:, 1], "k--", lw=0.8, label="reference" if i == 0 else None)
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.legend()
        return _save(fig, path)
