"""Label-map rendering: deterministic P6 pixmaps plus matplotlib report figures."""

from __future__ import annotations

import colorsys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .cube import BadMagicError, LabelMap, TruncatedFileError

# distinct base colors; class 0 (unlabeled) is black
_BASE = [
    (0, 0, 0),
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (0, 128, 128), (230, 190, 255), (170, 110, 40),
    (128, 0, 0), (170, 255, 195), (128, 128, 0), (255, 215, 180),
    (0, 0, 128), (128, 128, 128), (255, 250, 200), (250, 190, 212),
]

_PNG_METADATA = {"Software": "hypercrf"}


def palette(n: int) -> np.ndarray:
    """(n, 3) uint8 palette indexed by class id; extends past the base colors
    with golden-angle hues."""
    out = np.zeros((n, 3), dtype=np.uint8)
    for i in range(n):
        if i < len(_BASE):
            out[i] = _BASE[i]
        else:
            h = (i * 0.618033988749895) % 1.0
            v = 0.95 - 0.25 * ((i // 7) % 3)
            r, g, b = colorsys.hsv_to_rgb(h, 0.85, v)
            out[i] = (int(r * 255), int(g * 255), int(b * 255))
    return out


def render_label_map(labels: LabelMap, path) -> None:
    """Write a binary pixmap (P6) with the fixed class palette."""
    pal = palette(int(labels.labels.max(initial=0)) + 1)
    rgb = pal[labels.labels.astype(np.intp)]
    with open(Path(path), "wb") as fh:
        fh.write(f"P6\n{labels.width} {labels.height}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_pixmap(path) -> np.ndarray:
    """Read a P6 pixmap back as (H, W, 3) uint8."""
    with open(Path(path), "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise BadMagicError(f"expected P6 pixmap, found {magic!r}")
        dims = fh.readline().split()
        maxval = fh.readline().strip()
        w, h = int(dims[0]), int(dims[1])
        if maxval != b"255":
            raise ValueError(f"unsupported maxval {maxval!r}")
        payload = fh.read(3 * w * h)
        if len(payload) != 3 * w * h:
            raise TruncatedFileError("pixmap payload shorter than declared")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)


def render_error_map(errors: np.ndarray, path) -> None:
    """White = misclassified, black = everything else."""
    rgb = np.where(errors[..., None], 255, 0).astype(np.uint8).repeat(3, axis=2)
    h, w = errors.shape
    with open(Path(path), "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


# ---------------------------------------------------------------------------
# matplotlib report figures (rendered alongside the delimited outputs)
# ---------------------------------------------------------------------------

def _save(fig, path) -> None:
    fig.savefig(Path(path), dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)


def save_loss_figure(curves: dict[str, list[tuple[float, float]]], path, title: str) -> None:
    """Train/val loss curves per named network."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for name, hist in sorted(curves.items()):
        epochs = np.arange(1, len(hist) + 1)
        tr = [h[0] for h in hist]
        va = [h[1] for h in hist]
        ax.plot(epochs, tr, label=f"{name} train")
        if not np.all(np.isnan(va)):
            ax.plot(epochs, va, "--", label=f"{name} val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def save_label_figure(labels: LabelMap, path, title: str) -> None:
    n = int(labels.labels.max(initial=0)) + 1
    pal = palette(n).astype(np.float64) / 255.0
    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    ax.imshow(pal[labels.labels.astype(np.intp)], interpolation="nearest")
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    _save(fig, path)


def save_error_figure(errors: np.ndarray, path, title: str) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    ax.imshow(errors, cmap="gray", interpolation="nearest", vmin=0, vmax=1)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    _save(fig, path)


def save_metrics_figure(report, path, title: str) -> None:
    classes = sorted(report.per_class_accuracy)
    vals = [report.per_class_accuracy[c] for c in classes]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.bar([str(c) for c in classes], vals, color="#4878b0")
    ax.axhline(report.oa, color="#d1615d", label=f"OA = {report.oa:.2f}")
    ax.axhline(report.aa, color="#6aa66a", linestyle="--", label=f"AA = {report.aa:.2f}")
    ax.set_xlabel("class")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 105)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
