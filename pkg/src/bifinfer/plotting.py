"""SVG figures of traced diagrams and optimizer histories."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_diagram", "plot_history", "plot_scaling"]

# fixed salt and no date stamp make the SVG output byte-reproducible
_RC = {"svg.hashsalt": "bifinfer", "svg.fonttype": "none"}
_META = {"Date": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)
    return path


def _runs(mask):
    """Contiguous (start, stop) index runs where ``mask`` is constant."""
    if mask.size == 0:
        return []
    cut = np.flatnonzero(mask[1:] != mask[:-1]) + 1
    edges = np.concatenate([[0], cut, [mask.size]])
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def plot_diagram(diagram, path, predictions=None, targets=None, state: int = 0, title: str | None = None) -> Path:
    """Branches in the (p, u_state) plane.

    Solid segments have det > 0, dashed det < 0. Predicted bifurcations are
    drawn as markers and targets as vertical lines.
    """
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        for bid, br in enumerate(diagram.branches):
            color = f"C{bid % 10}"
            pos = np.asarray(br.det) > 0
            if np.all(np.isnan(br.det)):
                pos = np.ones(len(br), dtype=bool)
            for a, b in _runs(pos):
                # overlap one sample so the pieces join
                sl = slice(max(a - 1, 0), b)
                ax.plot(br.zs[sl, -1], br.zs[sl, state], color=color, lw=1.5,
                        ls="-" if pos[a] else "--", label=f"branch {bid}" if a == 0 else None)
        if targets is not None:
            for k, d in enumerate(np.atleast_1d(targets)):
                ax.axvline(float(d), color="0.5", lw=0.8, ls=":", label="target" if k == 0 else None)
        if predictions is not None and len(predictions):
            zs = np.array([pt.z for pt in predictions.points])
            ax.plot(zs[:, -1], zs[:, state], "o", color="k", ms=5, label="bifurcation", gid="bifurcations")
        ax.set_xlim(*diagram.p_window)
        ax.set_xlabel("p")
        ax.set_ylabel(f"u{state + 1}")
        if title:
            ax.set_title(title)
        if diagram.branches:
            ax.legend(fontsize="small", loc="best")
        fig.tight_layout()
        return _save(fig, path)


def plot_history(records, path, tol_E: float | None = None) -> Path:
    """Supervised error against step for each run (log scale)."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        for rec in records:
            e = np.array([np.nan if s["E"] is None else s["E"] for s in rec.steps], dtype=float)
            ax.plot(np.arange(e.size), e, lw=0.8, alpha=0.8)
        if tol_E is not None:
            ax.axhline(tol_E, color="k", lw=0.8, ls=":")
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("E")
        fig.tight_layout()
        return _save(fig, path)


def plot_scaling(ns, times, slope: float, path) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.loglog(ns, times, "o-")
        ax.set_xlabel("N")
        ax.set_ylabel("gradient time [s]")
        ax.set_title(f"log-log slope {slope:.2f}")
        fig.tight_layout()
        return _save(fig, path)
