"""Matplotlib figures for evaluation results, written next to the metric JSON."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_COLORS = {"gmask": "#c2185b", "imask": "#00796b", "random": "#777777", "loo": "#5c6bc0"}


def _color(method: str) -> str:
    return _COLORS.get(method, "#222222")


def degradation_figure(results: dict, path) -> None:
    """One panel per method: MoRF (solid) and LeRF (dashed) curves."""
    methods = [m for m, ev in results.items() if ev.curves is not None]
    if not methods:
        return
    fig, axes = plt.subplots(1, len(methods), figsize=(3.2 * len(methods), 3.0),
                             sharey=True, squeeze=False)
    for ax, method in zip(axes[0], methods):
        ev = results[method]
        rho = ev.curves.rho_grid
        ax.plot(rho, ev.curves.morf, color=_color(method), label="MoRF")
        ax.plot(rho, ev.curves.lerf, color=_color(method), linestyle="--", label="LeRF")
        ax.fill_between(rho, ev.curves.morf, ev.curves.lerf,
                        color=_color(method), alpha=0.15)
        ax.set_title(f"{method} (score {ev.degradation_score:.3f})", fontsize=9)
        ax.set_xlabel("words removed (%)")
        ax.legend(fontsize=8)
    axes[0][0].set_ylabel("normalized probability")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def posthoc_figure(results: dict, path) -> None:
    methods = [m for m, ev in results.items() if ev.posthoc is not None]
    if not methods:
        return
    fig, ax = plt.subplots(figsize=(4.2, 3.0))
    for method in methods:
        grid = sorted(results[method].posthoc)
        ax.plot(grid, [results[method].posthoc[v] for v in grid],
                marker="o", markersize=3, color=_color(method), label=method)
    ax.set_xlabel("top words kept (v)")
    ax.set_ylabel("post-hoc accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def aopc_figure(results: dict, path) -> None:
    methods = [m for m, ev in results.items() if ev.aopc is not None]
    if not methods:
        return
    fig, ax = plt.subplots(figsize=(4.2, 3.0))
    ax.bar(methods, [results[m].aopc for m in methods],
           color=[_color(m) for m in methods])
    ax.set_ylabel("AOPC")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
