"""Static figures: precision/recall curves, loss curves and mask overlays."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy import ndimage  # noqa: E402

from .evaluation import IOU_THRESHOLDS, RECALL_THRESHOLDS  # noqa: E402


def plot_pr_curves(results, path, iou_thresholds=(0.5, 0.75)):
    """Category-averaged interpolated precision vs recall.

    ``results`` maps a label to an :class:`EvalResult`; one line is drawn per
    label and IoU threshold.
    """
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for label, res in results.items():
        if res.precision is None:
            continue
        for thr in iou_thresholds:
            t = int(np.argmin(np.abs(IOU_THRESHOLDS - thr)))
            p = res.precision[t]
            valid = p[0] >= 0  # categories with ground truth
            if not valid.any():
                continue
            ax.plot(RECALL_THRESHOLDS, p[:, valid].mean(axis=1), label=f"{label} @{thr:.2f}")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_loss_curves(reports, path):
    """Per-term and total loss against training step."""
    if not reports:
        raise ValueError("no loss records to plot")
    steps = [r.step for r in reports]
    names = sorted({k for r in reports for k in r.terms})
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(steps, [r.total for r in reports], color="k", lw=1.5, label="total")
    for name in names:
        ax.plot(steps, [r.terms.get(name, np.nan) for r in reports], lw=0.8, label=name)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def overlay_image(image, masks):
    """RGB image with each mask's outline drawn in its own color."""
    out = np.array(image, dtype=np.uint8, copy=True)
    cmap = plt.get_cmap("tab10")
    for k, m in enumerate(masks):
        m = np.asarray(m, dtype=bool)
        edge = m & ~ndimage.binary_erosion(m, border_value=0)
        color = (np.array(cmap(k % 10)[:3]) * 255).astype(np.uint8)
        out[edge] = color
    return out


def save_overlay(scene, detections, path):
    masks = [d.paste(scene.shape) for d in detections]
    plt.imsave(path, overlay_image(scene.image, masks))
