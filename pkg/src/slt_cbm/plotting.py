"""SVG line plots of sweep tables (one series per model)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed salt + no date stamp keeps the SVG bytes identical across runs
_RC = {"svg.hashsalt": "slt-cbm", "svg.fonttype": "path", "font.size": 9}
_STYLE = {
    "cbm": {"linestyle": "--", "color": "tab:blue", "label": "CBM"},
    "multitask": {"linestyle": "-", "color": "tab:red", "label": "Multitask"},
    "standard": {"linestyle": ":", "color": "tab:gray", "label": "Standard"},
}


def plot_sweep(rows: list[dict], path: Path, title: str | None = None, axis_label: str = "K") -> None:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        for model, style in _STYLE.items():
            pts = [(r["axis"], float(r["lambda_float"])) for r in rows if r["model"] == model and r["status"] == "ok"]
            if not pts:
                continue
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker=".", markersize=3, linewidth=1.2, **style)
        ax.set_xlabel(axis_label)
        ax.set_ylabel("RLCT")
        if title:
            ax.set_title(title)
        if ax.lines:
            ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def plot_curve(per_n: list[dict], lam_theory: float, lam_hat: float, path: Path, ylabel: str = "estimate") -> None:
    """Per-n means with standard-error bars against the fitted and theoretical curves."""
    ns = [e["n"] for e in per_n]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        ax.errorbar(ns, [e["mean"] for e in per_n], yerr=[e["std_error"] for e in per_n],
                    fmt="o", markersize=3, color="k", capsize=2, label="replicate mean")
        if ylabel == "generalization error":
            grid = sorted(ns)
            ax.plot(grid, [lam_theory / n for n in grid], "--", color="tab:blue", label="theory")
            ax.plot(grid, [lam_hat / n for n in grid], "-", color="tab:red", label="fit")
            ax.set_xscale("log")
            ax.set_yscale("log")
        ax.set_xlabel("n")
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
