"""Similarity metrics and displacement-field regularizers.

The MIND descriptor compares each voxel's patch with patches at a small set of
neighbouring offsets. Patch distances are divided by their local mean, so any
intensity map of the form ``a * I + b`` leaves the descriptor unchanged. That
invariance is what lets the same loss serve unimodal and multimodal pairs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from itertools import product
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, as_tensor

__all__ = [
    "MindConfig",
    "DegenerateEntropyWarning",
    "default_offsets",
    "mind_descriptor",
    "mind_variance",
    "mind_loss",
    "field_regularizer",
    "REGULARIZERS",
    "nmi",
]

REGULARIZERS = ("l1_grad", "l2_grad", "bending_energy")


class DegenerateEntropyWarning(UserWarning):
    pass


def default_offsets(ndim: int) -> tuple:
    """The 2*ndim axis-aligned unit offsets, +e_k before -e_k."""
    out = []
    for k in range(ndim):
        for s in (1, -1):
            o = [0] * ndim
            o[k] = s
            out.append(tuple(o))
    return tuple(out)


@dataclass(frozen=True)
class MindConfig:
    offsets: Optional[tuple] = None
    patch_radius: int = 1
    eps: float = 1e-6
    patch_sigma: float = 0.5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"MIND variance floor must be positive, got {self.eps}")
        if self.patch_radius < 0:
            raise ValueError("patch_radius must be >= 0")
        if self.offsets is not None:
            offs = [tuple(int(v) for v in o) for o in self.offsets]
            if len(offs) < 2 or len(set(offs)) != len(offs) or any(not any(o) for o in offs):
                raise ValueError(f"MIND offsets must be >= 2 distinct nonzero vectors, got {self.offsets}")

    def resolved_offsets(self, ndim: int) -> tuple:
        if self.offsets is None:
            return default_offsets(ndim)
        offs = tuple(tuple(int(v) for v in o) for o in self.offsets)
        if any(len(o) != ndim for o in offs):
            raise ShapeError(f"MIND offsets {offs} do not match {ndim}D images")
        return offs

    def patch_kernel(self, ndim: int) -> np.ndarray:
        r = self.patch_radius
        ax = np.arange(-r, r + 1, dtype=np.float64)
        sq = sum(np.meshgrid(*([ax**2] * ndim), indexing="ij"))
        k = np.exp(-sq / (2.0 * self.patch_sigma**2))
        return k / k.sum()


def _patch_distances(image, cfg: MindConfig) -> Tensor:
    img = as_tensor(image)
    if img.shape[0] != 1:
        raise ShapeError(f"mind_descriptor expects a single-channel image, got {img.shape}")
    nd = img.ndim - 1
    min_extent = 2 * cfg.patch_radius + 3
    if any(n < min_extent for n in img.shape[1:]):
        raise ShapeError(f"image {img.shape[1:]} too small for MIND (need >= {min_extent} per axis)")
    offsets = cfg.resolved_offsets(nd)
    shifted = T.shift(img, offsets[0])
    for o in offsets[1:]:
        shifted = T.concat_channels(shifted, T.shift(img, o))
    d2 = T.square(T.sub(T.expand_channels(img, len(offsets)), shifted))
    return T.stencil(d2, cfg.patch_kernel(nd))


def mind_variance(image, cfg: MindConfig = MindConfig()) -> np.ndarray:
    """Unclamped local variance estimate; voxels below ``cfg.eps`` use the floor."""
    return T.channel_mean(_patch_distances(image, cfg)).data[0]


def mind_descriptor(image, cfg: MindConfig = MindConfig()) -> Tensor:
    """Per-voxel self-similarity vector, shape ``[|R|, *spatial]``, values in (0, 1].

    ``image`` is channel-first with one channel. Border patches sample with
    edge clamping.
    """
    dist = _patch_distances(image, cfg)
    n_off = dist.shape[0]
    variance = T.clamp_min(T.channel_mean(dist), cfg.eps)
    desc = T.exp(T.scale(T.div(dist, T.expand_channels(variance, n_off)), -1.0))
    return T.div(desc, T.expand_channels(T.channel_max(desc), n_off))


def mind_loss(warped, fixed, cfg: MindConfig = MindConfig()) -> Tensor:
    """Mean absolute descriptor difference over all voxels and offsets."""
    warped, fixed = as_tensor(warped), as_tensor(fixed)
    if warped.shape != fixed.shape:
        raise ShapeError(f"mind_loss: shape mismatch {warped.shape} vs {fixed.shape}")
    return T.mean(T.abs_(T.sub(mind_descriptor(warped, cfg), mind_descriptor(fixed, cfg))))


def _pooled_mean(terms: list) -> Tensor:
    total = T.sum_(terms[0])
    count = terms[0].data.size
    for t in terms[1:]:
        total = T.add(total, T.sum_(t))
        count += t.data.size
    return T.scale(total, 1.0 / count)


def field_regularizer(kind: str, field) -> Tensor:
    """Smoothness penalty on a ``[d, *spatial]`` displacement field.

    ``l1_grad`` / ``l2_grad`` average |du| or du^2 over every forward difference
    of every component. ``bending_energy`` sums the mean squared pure second
    differences and twice the mean squared mixed ones.
    """
    u = as_tensor(field)
    nd = u.ndim - 1
    if u.shape[0] != nd:
        raise ShapeError(f"field of shape {u.shape} must have {nd} components")
    axes = range(1, nd + 1)
    if kind == "l1_grad":
        return _pooled_mean([T.abs_(T.diff(u, ax)) for ax in axes])
    if kind == "l2_grad":
        return _pooled_mean([T.square(T.diff(u, ax)) for ax in axes])
    if kind == "bending_energy":
        first = {ax: T.diff(u, ax) for ax in axes}
        total = None
        for i, j in product(axes, axes):
            if j < i:
                continue
            term = T.mean(T.square(T.diff(first[i], j)))
            if i != j:
                term = T.scale(term, 2.0)
            total = term if total is None else T.add(total, term)
        return total
    raise ValueError(f"unknown regularizer '{kind}'")


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(a, b, bins: int = 32) -> float:
    """Normalized mutual information ``(H(A) + H(B)) / H(A, B) - 1`` in [0, 1].

    Identical non-constant images score 1, independent ones score near 0. A
    constant input has zero entropy; the result is then 0 and a
    :class:`DegenerateEntropyWarning` is issued.
    """
    a = np.asarray(a.data if hasattr(a, "data") else a, dtype=np.float64).ravel()
    b = np.asarray(b.data if hasattr(b, "data") else b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"nmi: shape mismatch {a.shape} vs {b.shape}")
    if bins < 8:
        raise ValueError(f"nmi needs at least 8 bins, got {bins}")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        warnings.warn("nmi of a constant image is defined as 0", DegenerateEntropyWarning, stacklevel=2)
        return 0.0
    joint, _, _ = np.histogram2d(a, b, bins=bins)
    h_a = _entropy(joint.sum(axis=1))
    h_b = _entropy(joint.sum(axis=0))
    h_ab = _entropy(joint)
    return (h_a + h_b) / h_ab - 1.0
