"""Report figures (matplotlib, PNG) and portable-graymap slice renderings."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = [
    "to_slice",
    "write_pgm",
    "read_pgm",
    "checkerboard",
    "field_magnitude",
    "plot_loss_curve",
    "plot_sweep",
    "plot_eval",
]


def to_slice(volume: np.ndarray, index: Optional[int] = None) -> np.ndarray:
    """2D arrays pass through; 3D arrays give the slice along axis 0 (middle by default)."""
    volume = np.asarray(volume)
    if volume.ndim == 2:
        return volume
    if volume.ndim != 3:
        raise ValueError(f"cannot take a 2D slice of shape {volume.shape}")
    index = volume.shape[0] // 2 if index is None else index
    if not 0 <= index < volume.shape[0]:
        raise IndexError(f"slice {index} outside 0..{volume.shape[0] - 1}")
    return volume[index]


def write_pgm(path, image: np.ndarray, lo: Optional[float] = None, hi: Optional[float] = None) -> Path:
    """Binary 8-bit PGM (P5), linearly windowed to [lo, hi] (data range by default)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"write_pgm expects a 2D image, got {img.shape}")
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    pixels = np.round(np.clip(scaled, 0.0, 1.0) * 255).astype(np.uint8)
    path = Path(path)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + pixels.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5" or len(parts) < 5:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    return np.frombuffer(raw[len(raw) - w * h :], dtype=np.uint8).reshape(h, w)


def checkerboard(a: np.ndarray, b: np.ndarray, tiles: int = 8) -> np.ndarray:
    """Alternate square tiles of two equally shaped 2D images, each min-max normalized."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"checkerboard needs two equal 2D images, got {a.shape} and {b.shape}")

    def norm(x):
        span = x.max() - x.min()
        return np.zeros_like(x) if span == 0 else (x - x.min()) / span

    rows = (np.arange(a.shape[0]) * tiles // a.shape[0])[:, None]
    cols = (np.arange(a.shape[1]) * tiles // a.shape[1])[None, :]
    return np.where((rows + cols) % 2 == 0, norm(a), norm(b))


def field_magnitude(field: np.ndarray) -> np.ndarray:
    field = np.asarray(field, dtype=np.float64)
    return np.sqrt((field**2).sum(axis=0))


def plot_loss_curve(history: Sequence[dict], path, title: str = "training loss") -> Path:
    """Per-step total loss and its per-epoch mean."""
    steps = np.arange(1, len(history) + 1)
    total = np.array([h["total"] for h in history])
    epochs = np.array([h["epoch"] for h in history])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, total, lw=0.5, alpha=0.4, label="step")
    ends = [steps[epochs == e][-1] for e in np.unique(epochs)]
    means = [total[epochs == e].mean() for e in np.unique(epochs)]
    ax.plot(ends, means, "o-", ms=3, label="epoch mean")
    if any(h.get("reg_term", 0.0) for h in history):
        ax.plot(steps, [h["sim_term"] for h in history], lw=0.5, alpha=0.6, label="similarity")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_sweep(cells: Sequence[dict], path) -> Path:
    """Mean Dice against weight, one line per regularizer kind."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for kind in dict.fromkeys(c["kind"] for c in cells):
        rows = sorted((c["weight"], c["mean_dice"]) for c in cells if c["kind"] == kind)
        ax.plot([w for w, _ in rows], [d for _, d in rows], "o-", label=kind)
    ax.set_xlabel("weight")
    ax.set_ylabel("mean Dice")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_eval(per_label: Dict[str, Sequence[float]], path, metric: str = "Dice") -> Path:
    """Bar per label with the spread over pairs as error bars."""
    names = list(per_label)
    means = [float(np.mean(per_label[n])) for n in names]
    stds = [float(np.std(per_label[n])) for n in names]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(names, means, yerr=stds, capsize=4, color="0.6")
    ax.set_ylabel(metric)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
