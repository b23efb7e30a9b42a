"""Report figures (PNG) for evaluation and refinement runs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.frameon": False,
    "lines.linewidth": 1.2,
    "svg.hashsalt": "biokin",
}

# PNG metadata normally embeds the matplotlib version; drop it so bytes stay stable
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp.png")
    fig.savefig(tmp, format="png", metadata=_PNG_META)
    plt.close(fig)
    tmp.replace(path)
    return path


def plot_frame_errors(per_frame: dict[str, np.ndarray], path, title: str = "per-frame error") -> Path:
    """One line per metric; metrics in millimeters share the left axis, degrees go on a twin axis."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        twin = None
        for name, values in per_frame.items():
            values = np.asarray(values, dtype=float)
            frames = np.arange(len(values))
            if name.endswith("deg"):
                twin = twin or ax.twinx()
                twin.plot(frames, values, ls="--", label=name, color="C3")
                twin.set_ylabel("degrees")
            else:
                ax.plot(frames, values, marker=".", label=name)
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.set_xlabel("frame")
        ax.set_ylabel("millimeters")
        ax.set_title(title)
        handles, labels = ax.get_legend_handles_labels()
        if twin is not None:
            h2, l2 = twin.get_legend_handles_labels()
            handles, labels = handles + h2, labels + l2
        if handles:
            ax.legend(handles, labels, loc="upper right")
        fig.tight_layout()
        return _save(fig, path)


def plot_loss_traces(traces: dict[str, list[float]], path, title: str = "refinement objective") -> Path:
    """Objective vs. step on a log axis, one curve per run."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, trace in traces.items():
            t = np.asarray(trace, dtype=float)
            ax.semilogy(np.arange(len(t)), np.maximum(t, 1e-300), marker="o", ms=3, label=label)
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.set_xlabel("step")
        ax.set_ylabel("objective")
        ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)
