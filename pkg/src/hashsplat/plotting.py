"""Report figures written next to the CSV outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_losses(history, path):
    it = np.array([r["iteration"] for r in history])
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(10, 3.5))
    for key in ("total", "photometric"):
        ax.plot(it, [r[key] for r in history], label=key, lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.legend()
    for key in ("mask", "static", "consistency", "denoise"):
        vals = np.array([r.get(key, 0.0) for r in history])
        if np.any(vals):
            ax2.plot(it, vals, label=key, lw=0.8)
    ax2.set_xlabel("iteration")
    ax2.set_title("weighted regularizers")
    if ax2.lines:
        ax2.legend()
    ax2r = ax2.twinx()
    ax2r.plot(it, [r["n_points"] for r in history], color="0.6", ls="--", lw=0.8)
    ax2r.set_ylabel("points")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metrics(report, path):
    ids = [str(f[0]) for f in report.frames]
    x = np.arange(len(ids))
    fig, (a, b) = plt.subplots(2, 1, figsize=(max(6, 0.15 * len(ids)), 5), sharex=True)
    a.bar(x, [f[1] for f in report.frames], color="tab:blue")
    a.axhline(report.psnr, color="k", lw=0.8)
    a.set_ylabel("PSNR (dB)")
    b.bar(x, [f[2] for f in report.frames], color="tab:orange")
    b.axhline(report.ssim, color="k", lw=0.8)
    b.set_ylabel("SSIM")
    b.set_xticks(x[:: max(1, len(x) // 20)])
    b.set_xticklabels(ids[:: max(1, len(x) // 20)], rotation=60, fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
