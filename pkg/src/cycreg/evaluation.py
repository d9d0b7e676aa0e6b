"""Non-differentiable registration metrics: Dice, ASD, folding, endpoint error."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from scipy.spatial.distance import cdist

from .losses import nmi
from .tensor import ShapeError
from .warp import warp_image

__all__ = [
    "LABEL_NAMES",
    "EvalReport",
    "warp_labels",
    "dice",
    "asd",
    "surface_voxels",
    "jacobian_stats",
    "endpoint_error",
    "evaluate_registration",
]

LABEL_NAMES = {0: "background", 1: "liver", 2: "spleen", 3: "kidney"}
ORGANS = (1, 2, 3)


def warp_labels(labels: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Nearest-neighbour label resampling at ``x + field(x)`` with border clamping."""
    labels = np.asarray(labels)
    field = np.asarray(field, dtype=np.float64)
    if field.shape != (labels.ndim,) + labels.shape:
        raise ShapeError(f"warp_labels: labels {labels.shape} vs field {field.shape}")
    idx = []
    for k, n in enumerate(labels.shape):
        coord = np.arange(n).reshape([-1 if a == k else 1 for a in range(labels.ndim)]) + field[k]
        idx.append(np.clip(np.floor(coord + 0.5), 0, n - 1).astype(np.intp))
    return labels[tuple(idx)]


def _check_label(a, b, label, names):
    if a.shape != b.shape:
        raise ShapeError(f"label maps differ in shape: {a.shape} vs {b.shape}")
    if label not in names:
        raise KeyError(f"unknown label id {label}")


def dice(a: np.ndarray, b: np.ndarray, label: int, names: Dict[int, str] = LABEL_NAMES) -> float:
    """2|A and B| / (|A| + |B|); 1 when both masks are empty."""
    a, b = np.asarray(a), np.asarray(b)
    _check_label(a, b, label, names)
    ma, mb = a == label, b == label
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((ma & mb).sum()) / total


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Coordinates of mask voxels with a face neighbour outside the mask or grid."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded.copy()
    for ax in range(mask.ndim):
        interior &= np.roll(padded, 1, axis=ax) & np.roll(padded, -1, axis=ax)
    core = tuple(slice(1, -1) for _ in range(mask.ndim))
    return np.argwhere(mask & ~interior[core])


def asd(a: np.ndarray, b: np.ndarray, label: int, spacing=None, names: Dict[int, str] = LABEL_NAMES) -> float:
    """Symmetric average surface distance in mm, by exhaustive nearest-point search."""
    a, b = np.asarray(a), np.asarray(b)
    _check_label(a, b, label, names)
    spacing = np.ones(a.ndim) if spacing is None else np.asarray(spacing, dtype=np.float64)
    sa, sb = surface_voxels(a == label), surface_voxels(b == label)
    if len(sa) == 0 or len(sb) == 0:
        raise ValueError(f"asd: label '{names[label]}' is empty in one of the maps")
    dist = cdist(sa * spacing, sb * spacing)
    return float((dist.min(axis=1).sum() + dist.min(axis=0).sum()) / (len(sa) + len(sb)))


def jacobian_stats(field: np.ndarray) -> dict:
    """Determinant of I + grad(u) on forward differences (trailing faces dropped)."""
    u = np.asarray(field, dtype=np.float64)
    nd = u.ndim - 1
    if any(n < 2 for n in u.shape[1:]):
        raise ShapeError("jacobian_stats needs extents >= 2")
    crop = tuple(slice(0, n - 1) for n in u.shape[1:])
    jac = np.empty(tuple(n - 1 for n in u.shape[1:]) + (nd, nd))
    for i in range(nd):
        for j in range(nd):
            d = np.diff(u[i], axis=j)
            jac[..., i, j] = d[crop] + (1.0 if i == j else 0.0)
    det = np.linalg.det(jac)
    return {"min_det": float(det.min()), "fold_fraction": float((det <= 0).mean())}


def endpoint_error(est: np.ndarray, truth: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    est, truth = np.asarray(est, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if est.shape != truth.shape:
        raise ShapeError(f"endpoint_error: shape mismatch {est.shape} vs {truth.shape}")
    norm = np.sqrt(((est - truth) ** 2).sum(axis=0))
    if mask is None:
        return float(norm.mean())
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("endpoint_error: mask is empty")
    return float(norm[mask].mean())


@dataclass
class EvalReport:
    dice: Dict[str, float] = field(default_factory=dict)
    asd_mm: Dict[str, float] = field(default_factory=dict)
    nmi: float = 0.0
    fold_fraction: float = 0.0
    min_det: float = 1.0
    endpoint_error: Optional[float] = None
    endpoint_error_by_label: Dict[str, float] = field(default_factory=dict)

    def mean_dice(self) -> float:
        return float(np.mean(list(self.dice.values())))

    def rows(self, pair_id: str) -> list:
        """One row per label for the evaluation CSV."""
        ee = "" if self.endpoint_error is None else self.endpoint_error
        return [
            {
                "pair_id": pair_id,
                "label_name": name,
                "dice": self.dice[name],
                "asd_mm": self.asd_mm[name],
                "nmi": self.nmi,
                "fold_fraction": self.fold_fraction,
                "endpoint_error": self.endpoint_error_by_label.get(name, ee),
            }
            for name in self.dice
        ]


def evaluate_registration(pair, field: np.ndarray, labels=ORGANS, names: Dict[int, str] = LABEL_NAMES) -> EvalReport:
    """Score a predicted field for a pair with labels (and optionally ground truth)."""
    field = np.asarray(field, dtype=np.float64)
    warped = warp_image(pair.moving[None], field).data[0]
    warped_labels = warp_labels(pair.moving_labels, field)
    stats = jacobian_stats(field)
    report = EvalReport(nmi=nmi(warped, pair.fixed), fold_fraction=stats["fold_fraction"], min_det=stats["min_det"])
    for lab in labels:
        name = names[lab]
        report.dice[name] = dice(warped_labels, pair.fixed_labels, lab, names)
        report.asd_mm[name] = asd(warped_labels, pair.fixed_labels, lab, pair.spacing, names)
        if pair.true_field is not None:
            report.endpoint_error_by_label[name] = endpoint_error(field, pair.true_field, pair.fixed_labels == lab)
    if pair.true_field is not None:
        report.endpoint_error = endpoint_error(field, pair.true_field)
    return report
