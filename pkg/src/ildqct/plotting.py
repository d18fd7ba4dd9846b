"""SVG figures written next to the CSV outputs.

Figures are built on a bare ``Figure`` with the Agg canvas, so no global
pyplot state is touched. The SVG hash salt and date are pinned to make the
bytes a pure function of the data.
"""
from __future__ import annotations

import io
import os
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
from matplotlib.backends.backend_agg import FigureCanvasAgg  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from .volume_io import atomic_write_text  # noqa: E402

_RC = {"svg.hashsalt": "ildqct", "svg.fonttype": "path", "font.size": 9}


def _save_svg(fig: Figure, path: str | os.PathLike) -> None:
    FigureCanvasAgg(fig)
    buf = io.StringIO()
    with matplotlib.rc_context(_RC):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    atomic_write_text(path, buf.getvalue())


def plot_auc_sweep(windows: Sequence[float], series: Mapping[str, Sequence[float]], path,
                   title: str = "AUC vs window size") -> None:
    """One line per series over the window sizes."""
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(5.0, 3.4))
        ax = fig.add_subplot(1, 1, 1)
        markers = "osd^v<>"
        for i, (name, values) in enumerate(series.items()):
            ax.plot(list(windows), list(values), marker=markers[i % len(markers)], label=name)
        ax.set_xlabel("window size (mm)")
        ax.set_ylabel("pooled cross-validated AUC")
        ax.set_xticks(list(windows))
        ax.set_ylim(0.0, 1.02)
        ax.axhline(0.5, color="0.6", lw=0.8, ls=":")
        ax.set_title(title)
        ax.legend(loc="lower right", fontsize=7, frameon=False)
        fig.tight_layout()
    _save_svg(fig, path)


def plot_km(curves: Mapping[str, object], path, p_value: float | None = None,
            title: str = "Kaplan-Meier") -> None:
    """Step curves from KMCurve objects, starting at S=1 at t=0."""
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(5.0, 3.4))
        ax = fig.add_subplot(1, 1, 1)
        for name, km in curves.items():
            t = [0.0, *map(float, km.time)]
            s = [1.0, *map(float, km.survival)]
            ax.step(t, s, where="post", label=name)
        ax.set_xlabel("time (days)")
        ax.set_ylabel("event-free probability")
        ax.set_ylim(0.0, 1.02)
        if p_value is not None:
            ax.text(0.98, 0.95, f"log-rank p = {p_value:.3g}", transform=ax.transAxes, ha="right", va="top")
        ax.set_title(title)
        ax.legend(loc="lower left", fontsize=7, frameon=False)
        fig.tight_layout()
    _save_svg(fig, path)
