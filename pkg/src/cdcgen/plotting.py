"""Report figures, rendered to files with the non-interactive Agg backend."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

MARKERS = {"source": "o", "target": "^"}


def _save(fig, path):
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def projection_figure(coords, classes, domains, path, title="shared latent space (PCA)"):
    coords = np.asarray(coords)
    classes = np.asarray(classes)
    domains = np.asarray(domains)
    fig, ax = plt.subplots(figsize=(5, 5))
    cmap = plt.get_cmap("tab10")
    for dom, marker in MARKERS.items():
        for k in np.unique(classes):
            sel = (domains == dom) & (classes == k)
            if sel.any():
                ax.scatter(coords[sel, 0], coords[sel, 1], s=6, marker=marker, color=cmap(int(k) % 10),
                           alpha=0.6, label=f"{dom} {k}")
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    ax.set_title(title)
    ax.legend(fontsize=6, markerscale=2, ncol=2)
    return _save(fig, path)


def points_figure(panels, path):
    """Side-by-side 2-D scatter panels; ``panels`` is a list of (title, points, labels)."""
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 4), squeeze=False)
    cmap = plt.get_cmap("tab10")
    for ax, (title, pts, labels) in zip(axes[0], panels):
        pts = np.asarray(pts)
        colors = "gray" if labels is None else [cmap(int(k) % 10) for k in labels]
        ax.scatter(pts[:, 0], pts[:, 1], s=4, c=colors, alpha=0.6)
        ax.set_title(title)
        ax.set_aspect("equal", adjustable="datalim")
    return _save(fig, path)


def image_grid(images, path, ncol=10, title=None):
    """Grid of (N, 1, H, W) or (N, H, W) pixel images."""
    images = np.asarray(images)
    if images.ndim == 4:
        images = images[:, 0]
    n = len(images)
    nrow = max(1, -(-n // ncol))
    fig, axes = plt.subplots(nrow, ncol, figsize=(ncol, nrow), squeeze=False)
    for i, ax in enumerate(axes.flat):
        ax.axis("off")
        if i < n:
            ax.imshow(images[i], cmap="gray", vmin=0, vmax=255)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def metrics_figure(rows, columns, path):
    """Loss curves from metrics-CSV rows."""
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for c in columns:
        ax.plot(steps, [r[c] for r in rows], label=c)
    ax.set_xlabel("step")
    ax.legend(fontsize=6)
    return _save(fig, path)
