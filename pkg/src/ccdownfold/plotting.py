"""Figures for reports.  Uses the non-interactive Agg backend."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {"font.size": 9, "axes.labelsize": 9, "legend.fontsize": 8,
         "xtick.labelsize": 8, "ytick.labelsize": 8, "savefig.dpi": 150}

MARKERS = {"RHF": "s", "CCSD": "o", "bare": "v", "C1": "^", "C2": "D", "FCI": "*"}


def error_figure(columns: list[str], errors: dict[str, list], path, reference: str = "FCI",
                 title: str | None = None) -> None:
    """Absolute error (mH, log scale) of each method across the compared systems."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.4))
        xs = np.arange(len(columns))
        for method, vals in errors.items():
            y = np.array([np.nan if v is None else max(abs(v) * 1e3, 1e-9) for v in vals])
            if np.all(np.isnan(y)):
                continue
            ax.plot(xs, y, marker=MARKERS.get(method, "o"), label=method)
        ax.set_yscale("log")
        ax.set_xticks(xs)
        ax.set_xticklabels(columns, rotation=20, ha="right")
        ax.set_ylabel(f"|E - E({reference})| / mH")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def flow_figure(trajectory: list[dict], path) -> None:
    sweeps = [r["sweep"] for r in trajectory]
    change = [max(r["max_change"], 1e-16) for r in trajectory]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.semilogy(sweeps, change, marker="o")
        ax.set_xlabel("sweep")
        ax.set_ylabel("max amplitude change")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def residual_heatmap(residuals: np.ndarray, path, title: str = "") -> None:
    """Fit residuals; two-body tensors are shown as an (PQ) x (RS) matrix."""
    r = np.asarray(residuals)
    if r.ndim == 4:
        n = r.shape[0]
        r = r.reshape(n * n, n * n)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.4))
        lim = max(float(np.abs(r).max(initial=0.0)), 1e-16)
        im = ax.imshow(r, cmap="RdBu_r", vmin=-lim, vmax=lim)
        fig.colorbar(im, ax=ax)
        ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
