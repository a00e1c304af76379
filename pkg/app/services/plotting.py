"""PNG figures for per-frame traces and RD curves (Agg backend, no windows)."""

import logging
from collections.abc import Sequence as SequenceABC
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

from matplotlib import rc_context  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from app.services.evaluation import RDCurve, TraceRow  # noqa: E402

logger = logging.getLogger(__name__)

_STYLE = {
    "figure.figsize": (8.0, 4.5),
    "figure.dpi": 100,
    "font.size": 10,
    "axes.grid": True,
    "grid.linestyle": "--",
    "grid.alpha": 0.6,
    "lines.linewidth": 1.5,
    "path.simplify": False,
}
_DPI = 120
_MARKERS = ("o", "s", "^", "D", "v", "P", "X", "*")


def _save(fig: Figure, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    # no Software/date chunks so equal inputs give equal bytes
    fig.savefig(path, format="png", dpi=_DPI, metadata={"Software": None})
    logger.info("figure written", extra={"path": str(path)})
    return path


def trace_figure(rows: SequenceABC[TraceRow], column: str, label: str = "") -> Figure:
    if column not in ("bpp", "psnr_yuv", "psnr_y", "bits"):
        raise ValueError(f"Cannot plot trace column '{column}'")
    with rc_context(_STYLE):
        fig = Figure()
        ax = fig.add_subplot()
        frames = [r.frame_index for r in rows]
        values = [getattr(r, column) for r in rows]
        ax.plot(frames, values, marker=".", label=label or column)
        ax.set_xlabel("Frame")
        ax.set_ylabel({"bpp": "bpp", "bits": "bits", "psnr_y": "PSNR-Y (dB)"}.get(column, "YUV PSNR (dB)"))
        if label:
            ax.legend(loc="best")
        fig.tight_layout()
    return fig


def plot_trace(rows: SequenceABC[TraceRow], column: str, path: Path, label: str = "") -> Path:
    return _save(trace_figure(rows, column, label), path)


def rd_figure(curves: SequenceABC[RDCurve], title: str = "") -> Figure:
    with rc_context(_STYLE):
        fig = Figure()
        ax = fig.add_subplot()
        for index, curve in enumerate(curves):
            name = curve.label if curve.dataset == "default" else f"{curve.label} ({curve.dataset})"
            ax.plot(curve.bpp, curve.psnr, marker=_MARKERS[index % len(_MARKERS)], label=name)
        ax.set_xlabel("bpp")
        ax.set_ylabel("YUV PSNR (dB)")
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right")
        fig.tight_layout()
    return fig


def plot_rd_curves(curves: SequenceABC[RDCurve], path: Path, title: str = "") -> Path:
    if not curves:
        raise ValueError("Nothing to plot: no RD curves given")
    return _save(rd_figure(curves, title), path)
