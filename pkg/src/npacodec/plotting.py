"""Figures written straight to files (Agg backend, no display needed)."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed element ids and no timestamp, so identical data gives identical files
matplotlib.rcParams["svg.hashsalt"] = "npacodec"

GRID_KWARGS = dict(linestyle="-", color="black", linewidth=0.5, alpha=0.3)
LINE_KWARGS = dict(marker="o", markersize=4, linewidth=1.2)


def rd_plot(curves: dict, path, channel: str = "d1", title: str | None = None) -> None:
    """PSNR against bpp for each named curve; infinite PSNR points are left off."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for name, points in curves.items():
        pts = [
            (p.bpp, p.psnr_d1 if channel == "d1" else p.psnr_d2)
            for p in points
        ]
        pts = [(b, q) for b, q in pts if math.isfinite(q)]
        if pts:
            ax.plot(*zip(*pts), label=name, **LINE_KWARGS)
    ax.set_xlabel("bits per input point")
    ax.set_ylabel(f"{channel.upper()} PSNR (dB)")
    if title:
        ax.set_title(title)
    ax.grid(**GRID_KWARGS)
    if len(curves) > 1:
        ax.legend(loc="lower right", frameon=False)
    _save(fig, path)


def loss_plot(log, path, baseline: float | None = math.log(2)) -> None:
    """Training loss per step, with the uniform-coder cross-entropy as reference."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    steps = [s for s, _ in log]
    ax.plot(steps, [v for _, v in log], linewidth=1.0, label="train loss")
    if baseline is not None:
        ax.axhline(baseline, color="black", linewidth=0.8, linestyle="--", label="ln 2")
    ax.set_xlabel("step")
    ax.set_ylabel("BCE per symbol (nats)")
    ax.grid(**GRID_KWARGS)
    ax.legend(loc="upper right", frameon=False)
    _save(fig, path)


def _save(fig, path) -> None:
    fig.tight_layout()
    meta = {"Date": None} if str(path).lower().endswith(".svg") else None
    fig.savefig(path, metadata=meta)
    plt.close(fig)
