"""Figures for sweep tables and prediction overlays (Agg backend, files only)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# class id -> RGB in [0, 1]; background is transparent in overlays
CLASS_COLORS = np.array([
    [0.0, 0.0, 0.0],
    [0.10, 0.55, 1.00],
    [1.00, 0.80, 0.00],
    [1.00, 0.15, 0.15],
    [0.20, 0.85, 0.30],
    [0.85, 0.30, 0.95],
    [0.00, 0.90, 0.90],
    [1.00, 0.50, 0.00],
    [0.60, 0.60, 0.60],
])


def class_color(c: int) -> np.ndarray:
    return CLASS_COLORS[c % len(CLASS_COLORS)] if c else CLASS_COLORS[0]


def plot_sweep(result, axis: str, path) -> bool:
    """Mean mIoU along ``axis`` with per-seed points; one line per setting of the
    remaining axes. Returns False when the axis has fewer than two values."""
    rows = [r for r in result.rows if r.get("status") == "ok"]
    values = sorted({r[axis] for r in rows}, key=lambda v: (isinstance(v, str), v))
    if len(values) < 2:
        return False
    others = [a for a in result.axes if a != axis]
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[a] for a in others), []).append(r)
    categorical = any(isinstance(v, str) for v in values)
    xpos = {v: i for i, v in enumerate(values)} if categorical else {v: v for v in values}
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for key, members in sorted(groups.items(), key=lambda kv: str(kv[0])):
        members = sorted(members, key=lambda r: values.index(r[axis]))
        xs = [xpos[r[axis]] for r in members]
        label = ", ".join(f"{a}={v}" for a, v in zip(others, key)) or "mean"
        ax.plot(xs, [r["mean"] for r in members], marker="o", label=label)
        for s in result.seeds:
            pts = [(xpos[r[axis]], r.get(f"seed_{s}")) for r in members if r.get(f"seed_{s}") is not None]
            if pts:
                ax.scatter(*zip(*pts), s=8, color="gray", alpha=0.6, zorder=0)
    if categorical:
        ax.set_xticks(range(len(values)))
        ax.set_xticklabels(values, fontsize=7)
    else:
        ax.set_xticks(values)
    ax.set_xlabel(axis)
    ax.set_ylabel("mIoU (%)")
    ax.grid(alpha=0.3)
    if len(groups) > 1:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return True


def overlay(image: np.ndarray, mask: np.ndarray, alpha: float = 0.6) -> np.ndarray:
    """Blend class colours over a 3 x H x W image; returns H x W x 3 uint8."""
    rgb = np.clip(np.asarray(image, dtype=np.float64).transpose(1, 2, 0), 0.0, 1.0)
    mask = np.asarray(mask)
    colors = CLASS_COLORS[np.where(mask > 0, mask % len(CLASS_COLORS), 0)]
    out = np.where((mask > 0)[..., None], (1 - alpha) * rgb + alpha * colors, rgb)
    return np.rint(out * 255).astype(np.uint8)


def save_raster(path, rgb: np.ndarray) -> None:
    """PNG via matplotlib, or binary PPM when the suffix is .ppm."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        h, w, _ = rgb.shape
        path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())
        return
    plt.imsave(path, rgb)


def plot_lanes(path, image: np.ndarray, lanes, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(4.0, 2.2))
    ax.imshow(np.clip(image.transpose(1, 2, 0), 0, 1))
    for k, lane in enumerate(lanes):
        ax.plot(lane.xs, lane.ys, color=class_color(k + 1), lw=1.5)
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
