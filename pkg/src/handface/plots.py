"""Figures for training and evaluation runs (matplotlib, Agg backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
})

TERMS = ("mesh", "interaction", "depth", "adv")


def loss_curves(history: list, path) -> None:
    steps = [r["step"] for r in history]
    fig, (a0, a1) = plt.subplots(1, 2, figsize=(8, 3))
    a0.plot(steps, [r["total"] for r in history], lw=1.2, color="k")
    a0.set_yscale("symlog")
    a0.set_xlabel("step")
    a0.set_ylabel("total loss")
    for name in TERMS:
        vals = np.array([r.get(name, np.nan) for r in history])
        if np.any(np.abs(np.nan_to_num(vals)) > 0):
            a1.plot(steps, vals, lw=1, label=name)
    a1.set_yscale("symlog", linthresh=1e-3)
    a1.set_xlabel("step")
    a1.legend(frameon=False)
    fig.savefig(path)
    plt.close(fig)


def eval_figures(report, path) -> None:
    per = report.frames
    fig, (a0, a1) = plt.subplots(1, 2, figsize=(8, 3))
    if per:
        a0.hist([f["pve_mm"] for f in per], bins=20, color="0.4", label="PVE")
        a0.hist([f["pampjpe_mm"] for f in per], bins=20, color="tab:orange", alpha=0.6, label="PAMPJPE")
        a0.legend(frameon=False)
    a0.set_xlabel("error per frame (mm)")
    a0.set_ylabel("frames")
    keys = ("precision", "recall", "f_score", "accuracy")
    x = np.arange(len(keys))
    a1.bar(x - 0.2, [report.contact_hand[k] for k in keys], 0.4, label="hand")
    a1.bar(x + 0.2, [report.contact_face[k] for k in keys], 0.4, label="face")
    a1.set_xticks(x)
    a1.set_xticklabels(keys)
    a1.set_ylim(0, 1)
    a1.legend(frameon=False)
    fig.savefig(path)
    plt.close(fig)


def depth_preview(depth: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(3, 3))
    d = np.where(np.isfinite(depth), depth, np.nan)
    im = ax.imshow(d, cmap="viridis")
    ax.set_axis_off()
    fig.colorbar(im, ax=ax, fraction=0.046, label="depth (m)")
    fig.savefig(path)
    plt.close(fig)
