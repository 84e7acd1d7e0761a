"""Report figures written next to the JSON outputs of ``eval`` and ``propose``."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import lattice_cloud  # noqa: E402


def _show(ax, img, title):
    img = np.clip(np.asarray(img, dtype=float), 0, 1)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    ax.imshow(img, cmap="gray" if img.ndim == 2 else None, vmin=0, vmax=1, interpolation="nearest")
    ax.set_title(title, fontsize=9)
    ax.set_axis_off()


def plot_eval(pred, truth, known, reports: dict, path) -> None:
    """Truth, prediction and absolute-error map with the metrics in the title."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.6))
    _show(axes[0], truth, "truth")
    _show(axes[1], pred, "prediction")
    err = np.abs(pred - truth).mean(axis=-1) * 255.0
    im = axes[2].imshow(err, cmap="magma", interpolation="nearest")
    if known is not None and not np.all(known):
        axes[2].contour(np.asarray(known, float), levels=[0.5], colors="cyan", linewidths=0.6)
    axes[2].set_title("|error| (0-255)", fontsize=9)
    axes[2].set_axis_off()
    fig.colorbar(im, ax=axes[2], fraction=0.046)
    lines = []
    for region, rep in reports.items():
        lines.append(f"{region}: RMSE {rep.rmse:.2f}  PSNR {rep.psnr:.2f} dB  SSIM {rep.ssim:.3f}")
    fig.suptitle("\n".join(lines), fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_proposals(img, valid, proposals, path, top: int = 3) -> None:
    """Input with the lattices of the leading candidates overlaid, plus their ranking errors."""
    img = np.asarray(img, dtype=float)
    h, w = img.shape[:2]
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    _show(axes[0], img, "top candidates")
    if valid is not None and not np.all(valid):
        axes[0].contour(np.asarray(valid, float), levels=[0.5], colors="white", linewidths=0.6)
    colors = ["tab:red", "tab:cyan", "tab:orange", "tab:green", "tab:purple"]
    ranked = list(proposals.ranked)
    for i, cand in enumerate(ranked[:top]):
        pts = lattice_cloud(cand.pair, (w / 2.0, h / 2.0), w, h).points
        axes[0].scatter(pts[:, 0], pts[:, 1], s=6, color=colors[i % len(colors)],
                        label=f"#{i + 1} q={cand.q} d1={tuple(cand.pair.d1)} d2={tuple(cand.pair.d2)}")
    if ranked:
        axes[0].legend(fontsize=6, loc="lower left")
    vals = [c.error if c.error is not None else c.score for c in ranked]
    axes[1].bar(range(1, len(vals) + 1), vals, color="tab:blue")
    axes[1].set_xlabel("rank")
    axes[1].set_ylabel("pseudo-mask RMSE" if proposals.method == "pseudo-mask" else "detection score")
    axes[1].set_title(f"ranking ({proposals.method})", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
