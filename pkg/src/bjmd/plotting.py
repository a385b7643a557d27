"""Figures written next to the CSV outputs of ``fit`` and ``sweep``."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path):
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_trace(trace, path, engine="map", h_change=None, check_iterations=None):
    """Objective (MAP) or ELBO (VI) against iteration; VI also gets the H-change panel."""
    trace = np.asarray(trace, dtype=float)
    with plt.rc_context(RC):
        ncols = 2 if h_change else 1
        fig, axes = plt.subplots(1, ncols, figsize=(3.4 * ncols, 2.6), squeeze=False)
        ax = axes[0, 0]
        if engine == "map":
            ax.plot(np.arange(trace.size), trace, marker="o", ms=3, lw=1)
            ax.set_ylabel("objective")
        else:
            ax.plot(np.arange(1, trace.size + 1), trace, lw=0.5)
            finite = trace[np.isfinite(trace)]
            if finite.size > 10:
                lo = np.percentile(finite, 5)
                ax.set_ylim(lo - 0.05 * abs(lo), finite.max() + 0.05 * abs(lo) * 0.1)
            ax.set_ylabel("ELBO estimate")
        ax.set_xlabel("iteration")
        if h_change:
            ax = axes[0, 1]
            ax.semilogy(check_iterations, h_change, lw=1)
            ax.set_xlabel("iteration")
            ax.set_ylabel("relative change of H (%)")
        fig.tight_layout()
        return _save(fig, path)


def plot_sweep(rows, path):
    """AUC against the third source's noise level, one panel per source."""
    sources = sorted({r["source"] for r in rows})
    combos = sorted({(r["engine"], r["variant"]) for r in rows})
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(sources), figsize=(3.0 * len(sources), 2.6), squeeze=False, sharey=True)
        for ax, src in zip(axes[0], sources):
            for engine, variant in combos:
                pts = sorted((r["sigma3"], r["auc"]) for r in rows
                             if r["source"] == src and r["engine"] == engine and r["variant"] == variant)
                if not pts:
                    continue
                x, y = zip(*pts)
                label = f"{engine.upper()}-{'catBJMD' if variant == 'cat' else 'BJMD'}"
                ax.plot(x, y, marker="o", ms=3, lw=1, ls="--" if variant == "bjmd" else "-", label=label)
            ax.set_title(f"source {src}")
            ax.set_xlabel(r"$\sigma_3$")
        axes[0, 0].set_ylabel("AUC (%)")
        axes[0, -1].legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
