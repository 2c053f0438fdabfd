"""Plot rendering for experiment outputs.

Each renderer takes the rows a CLI command produced and writes PNG files
next to the delimited output.  Rendering is optional and never affects the
CSV contents.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt


def _stem(out_csv, suffix):
    path = Path(out_csv)
    return str(path.with_name(path.stem + suffix + ".png"))


def render_bench(rows, out_csv):
    """MSE against training-set size, one line per derivative order, one
    panel per benchmark function."""
    files = []
    functions = sorted({r["function"] for r in rows})
    for fn in functions:
        sub = [r for r in rows if r["function"] == fn]
        orders = sorted({int(r["d"]) for r in sub})
        fig, ax = plt.subplots(figsize=(5, 4))
        for d in orders:
            pts = sorted((int(r["n"]), float(r["mse"])) for r in sub if int(r["d"]) == d)
            ax.semilogy([p[0] for p in pts], [p[1] for p in pts],
                        marker="o", label=f"order {d}")
        ax.set_xlabel("training points")
        ax.set_ylabel("MSE")
        ax.set_title(fn)
        ax.legend(fontsize=8)
        ax.grid(True, which="both", alpha=0.3)
        out = _stem(out_csv, f"_{fn}")
        fig.tight_layout()
        fig.savefig(out, dpi=150)
        plt.close(fig)
        files.append(out)
    return files


def render_dynamic(rows, out_csv):
    """Held-out MSE per accepted stream step for each update approach."""
    approaches = sorted({r["approach"] for r in rows})
    orders = sorted({int(r["d"]) for r in rows})
    fig, axes = plt.subplots(1, len(approaches), figsize=(5 * len(approaches), 4),
                             squeeze=False)
    for ax, approach in zip(axes[0], approaches):
        for d in orders:
            pts = sorted((int(r["step"]), float(r["mse"])) for r in rows
                         if r["approach"] == approach and int(r["d"]) == d)
            ax.semilogy([p[0] for p in pts], [p[1] for p in pts],
                        marker="o", label=f"order {d}")
        ax.set_xlabel("stream points added")
        ax.set_ylabel("MSE")
        ax.set_title(approach)
        ax.legend(fontsize=8)
        ax.grid(True, which="both", alpha=0.3)
    out = _stem(out_csv, "_mse")
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return [out]


def render_dt(rows, out_csv):
    """Crack-growth-rate discrepancy over the service life, per mode."""
    insp = [r for r in rows if r["kind"] == "i"]
    modes = sorted({r["mode"] for r in insp})
    ncols = max(len(modes), 1)
    fig, axes = plt.subplots(1, ncols, figsize=(4.5 * ncols, 4), squeeze=False)
    for ax, mode in zip(axes[0], modes):
        sub = [r for r in insp if r["mode"] == mode]
        keys = sorted({(int(r["d"]), float(r["interval"])) for r in sub})
        for d, interval in keys:
            pts = sorted((float(r["cycle"]), float(r["eta_pct"])) for r in sub
                         if int(r["d"]) == d and float(r["interval"]) == interval)
            label = f"order {d}" + (f", dN={interval:g}" if len(keys) > 1 else "")
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
        ax.set_xlabel("cycles")
        ax.set_ylabel("rate difference (%)")
        ax.set_title(mode)
        ax.legend(fontsize=8)
        ax.grid(True, alpha=0.3)
    out = _stem(out_csv, "_eta")
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return [out]
