"""Synthetic two-modality abdominal phantoms with known deformations.

Each phantom is a body ellipse holding three labelled organs (liver, spleen,
kidney). Modality A and modality B share the anatomy but map labels to
intensities in a different order, and B additionally passes through a smooth
monotone remap. Ground-truth deformations combine a low-frequency global field
with a strong radial push centred in the liver.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import center_of_mass, gaussian_filter

from .evaluation import LABEL_NAMES, jacobian_stats, warp_labels
from .warp import warp_image

logger = logging.getLogger(__name__)

__all__ = [
    "PhantomSpec",
    "DeformSpec",
    "Pair",
    "DeformationError",
    "generate_phantom",
    "generate_deformation",
    "invert_field",
    "build_dataset",
]

LIVER = 1


class DeformationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple = (64, 64)
    # intensity per label id (background, liver, spleen, kidney), then body tissue and liver vessels
    intensities_a: tuple = (0.0, 0.55, 0.72, 0.9, 0.35, 0.8)
    intensities_b: tuple = (0.05, 0.3, 0.5, 0.15, 0.8, 0.65)
    vessels: int = 6
    remap_strength: float = 2.0
    blur_sigma: float = 0.7
    noise_sigma: float = 1e-4
    geometry_jitter: float = 0.04
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        if len(self.shape) not in (2, 3) or min(self.shape) < 16:
            raise ValueError(f"phantom shape must be 2D/3D with extents >= 16, got {self.shape}")
        if len(self.intensities_a) != 6 or len(self.intensities_b) != 6:
            raise ValueError("intensity maps need 6 entries (4 labels, body, vessels)")


@dataclass(frozen=True)
class DeformSpec:
    global_max: float = 3.0
    local_max: float = 8.0
    global_scale: float = 0.12
    radial_gain: float = 1.5
    severe_label: int = LIVER
    seed: int = 0


@dataclass
class Pair:
    moving: np.ndarray
    fixed: np.ndarray
    moving_labels: Optional[np.ndarray] = None
    fixed_labels: Optional[np.ndarray] = None
    true_field: Optional[np.ndarray] = None
    spacing: tuple = None

    def __post_init__(self):
        if self.moving.shape != self.fixed.shape:
            raise ValueError(f"pair shapes differ: {self.moving.shape} vs {self.fixed.shape}")
        if self.spacing is None:
            self.spacing = (1.0,) * self.moving.ndim


# Organ geometry in normalized coordinates: centre and semi-axes as fractions
# of the extent along each axis. Row axis first; 3D adds a depth axis.
_BODY = ((0.5, 0.5, 0.5), (0.44, 0.46, 0.45))
_ORGANS = (
    (1, (0.42, 0.34, 0.5), (0.22, 0.2, 0.3)),  # liver
    (2, (0.40, 0.72, 0.5), (0.11, 0.1, 0.2)),  # spleen
    (3, (0.70, 0.58, 0.5), (0.09, 0.07, 0.15)),  # kidney
)


def _ellipse(shape, centre, radii) -> np.ndarray:
    grid = np.indices(shape, dtype=np.float64)
    r2 = np.zeros(shape)
    for k, n in enumerate(shape):
        r2 += ((grid[k] - centre[k] * (n - 1)) / (radii[k] * n)) ** 2
    return r2 <= 1.0


def _remap(v: np.ndarray, strength: float) -> np.ndarray:
    if strength == 0:
        return v
    return (1.0 - np.exp(-strength * v)) / (1.0 - np.exp(-strength))


def generate_phantom(spec: PhantomSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (modality A, modality B, labels) for one seeded phantom."""
    rng = np.random.default_rng(spec.seed)
    nd = len(spec.shape)
    j = spec.geometry_jitter

    def jitter(values):
        return tuple(v + rng.uniform(-j, j) for v in values[:nd])

    body = _ellipse(spec.shape, jitter(_BODY[0]), _BODY[1][:nd])
    labels = np.zeros(spec.shape, dtype=np.int64)
    for lab, centre, radii in _ORGANS:
        radii = tuple(r * (1 + rng.uniform(-2 * j, 2 * j)) for r in radii[:nd])
        labels[_ellipse(spec.shape, jitter(centre), radii) & body] = lab
    for lab, name in LABEL_NAMES.items():
        if not np.any(labels == lab):
            raise ValueError(f"degenerate phantom: '{name}' is empty")

    # vessels: small disks inside the liver, visible in both modalities
    vessel = np.zeros(spec.shape, dtype=bool)
    liver_idx = np.argwhere(labels == LIVER)
    for _ in range(spec.vessels):
        centre = liver_idx[rng.integers(len(liver_idx))] / (np.array(spec.shape) - 1)
        radius = rng.uniform(1.2, 2.2)
        vessel |= _ellipse(spec.shape, centre, radius / np.array(spec.shape, dtype=np.float64))
    vessel &= labels == LIVER

    def render(intensity):
        img = np.asarray(intensity)[labels].astype(np.float64)
        img[(labels == 0) & body] = intensity[4]
        img[vessel] = intensity[5]
        if spec.blur_sigma > 0:
            img = gaussian_filter(img, spec.blur_sigma, mode="nearest")
        return img

    mod_a = render(spec.intensities_a)
    mod_b = render(spec.intensities_b)
    mod_b = _remap(mod_b, spec.remap_strength)
    if spec.noise_sigma > 0:
        mod_a = mod_a + rng.normal(0, spec.noise_sigma, spec.shape)
        mod_b = mod_b + rng.normal(0, spec.noise_sigma, spec.shape)
    return mod_a, mod_b, labels


def _global_field(shape, spec: DeformSpec, rng) -> np.ndarray:
    nd = len(shape)
    sigma = spec.global_scale * min(shape)
    u = np.stack([gaussian_filter(rng.normal(size=shape), sigma, mode="wrap") for _ in range(nd)])
    peak = np.sqrt((u**2).sum(axis=0)).max()
    return u * (spec.global_max / peak) if peak > 0 else u


def _radial_push(shape, centre, spec: DeformSpec) -> np.ndarray:
    """u(x) = k (x - c) exp(-|x - c|^2 / 2 s^2), peaking at ``local_max`` on |x - c| = s."""
    k = spec.radial_gain
    s = spec.local_max / (k * np.exp(-0.5))
    rel = np.indices(shape, dtype=np.float64) - np.reshape(centre, (-1,) + (1,) * len(shape))
    r2 = (rel**2).sum(axis=0)
    return k * rel * np.exp(-r2 / (2 * s * s))


def generate_deformation(spec: DeformSpec, labels: np.ndarray, max_retries: int = 10) -> np.ndarray:
    """Global smooth field plus a radial push centred on the severe-region label.

    The magnitudes are damped by 0.8 and the field regenerated until its
    minimum Jacobian determinant is positive.
    """
    shape = labels.shape
    if not np.any(labels == spec.severe_label):
        raise ValueError(f"labels contain no voxels of label {spec.severe_label}")
    if spec.global_max == 0 and spec.local_max == 0:
        return np.zeros((len(shape),) + shape)
    centre = np.array(center_of_mass(labels == spec.severe_label))
    current = spec
    for attempt in range(max_retries + 1):
        rng = np.random.default_rng(spec.seed)
        u = np.zeros((len(shape),) + shape)
        if current.global_max > 0:
            u += _global_field(shape, current, rng)
        if current.local_max > 0:
            u += _radial_push(shape, centre, current)
        if jacobian_stats(u)["min_det"] > 0:
            return u
        logger.debug("deformation attempt %d folded; damping", attempt)
        current = replace(
            current,
            global_max=current.global_max * 0.8,
            local_max=current.local_max * 0.8,
            radial_gain=current.radial_gain * 0.8,
        )
    raise DeformationError(f"no fold-free deformation after {max_retries} damping retries")


def invert_field(u: np.ndarray, iterations: int = 500, tol: float = 1e-8) -> np.ndarray:
    """Inverse displacement v with v(x) + u(x + v(x)) = 0.

    Plain fixed-point iteration ``v <- -u(x + v)`` diverges where the field
    expands faster than unit rate (the centre of the liver push), so each
    update is relaxed by one half.
    """
    v = -u.copy()
    for _ in range(iterations):
        residual = v + warp_image(u, v).data
        if np.abs(residual).max() < tol:
            break
        v = v - 0.5 * residual
    return v


def build_dataset(
    n_pairs: int,
    phantom: PhantomSpec = PhantomSpec(),
    deform: DeformSpec = DeformSpec(),
    split: Tuple[int, int] = (40, 10),
) -> Tuple[List[Pair], List[Pair]]:
    """Fresh phantom and ground-truth field per pair, split into (train, test).

    ``fixed`` is the modality-B phantom. ``true_field`` is the displacement
    that registers ``moving`` onto ``fixed``; ``moving`` is modality A warped
    by its numerical inverse, so ``warp(moving, true_field)`` recovers A up to
    interpolation error.
    """
    if len(split) != 2 or min(split) < 0 or sum(split) != n_pairs:
        raise ValueError(f"split {split} does not partition {n_pairs} pairs")
    pairs = []
    for i in range(n_pairs):
        seeds = np.random.SeedSequence([phantom.seed, deform.seed, i]).generate_state(2)
        mod_a, mod_b, labels = generate_phantom(replace(phantom, seed=int(seeds[0])))
        field = generate_deformation(replace(deform, seed=int(seeds[1])), labels)
        inverse = invert_field(field)
        moving = warp_image(mod_a[None], inverse).data[0]
        pairs.append(
            Pair(
                moving=moving,
                fixed=mod_b,
                moving_labels=warp_labels(labels, inverse),
                fixed_labels=labels,
                true_field=field,
            )
        )
    return pairs[: split[0]], pairs[split[0] :]
