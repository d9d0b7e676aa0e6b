"""Spatial transformer: backward warping with (bi/tri)linear interpolation.

Displacements are in voxel units with a leading component axis, so component
``k`` of a field moves samples along spatial axis ``k``. Sample locations that
leave the grid are clamped to the border.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from itertools import product

import numpy as np

from .tensor import ShapeError, Tensor, record_op, add, as_tensor

__all__ = ["Volume", "DisplacementField", "warp_image", "compose_displacements", "identity_grid"]


@dataclass
class Volume:
    """Scalar image on a regular grid; ``spacing`` is mm per voxel per axis."""

    data: np.ndarray
    spacing: tuple = dc_field(default=None)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim not in (2, 3):
            raise ShapeError(f"Volume must be 2D or 3D, got {self.data.ndim}D")
        if self.spacing is None:
            self.spacing = (1.0,) * self.data.ndim
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != self.data.ndim or any(s <= 0 for s in self.spacing):
            raise ValueError(f"invalid spacing {self.spacing} for shape {self.data.shape}")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def as_tensor(self, requires_grad: bool = False) -> Tensor:
        return Tensor(self.data[None], requires_grad=requires_grad)


@dataclass
class DisplacementField:
    """Per-voxel displacement vectors, array shape ``[d, *spatial]``."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim - 1 != self.data.shape[0]:
            raise ShapeError(f"field with shape {self.data.shape} needs {self.data.ndim - 1} components")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("displacement field contains non-finite values")

    @property
    def shape(self) -> tuple:
        return self.data.shape[1:]

    @classmethod
    def zeros(cls, shape) -> "DisplacementField":
        return cls(np.zeros((len(shape),) + tuple(shape)))

    def as_tensor(self, requires_grad: bool = False) -> Tensor:
        return Tensor(self.data, requires_grad=requires_grad)


def identity_grid(shape) -> np.ndarray:
    return np.indices(shape, dtype=np.float64)


def _interp_setup(u: np.ndarray):
    spatial = u.shape[1:]
    if any(n < 2 for n in spatial):
        raise ShapeError(f"warp needs every extent >= 2, got {spatial}")
    raw = identity_grid(spatial) + u
    hi = np.array(spatial, dtype=np.float64).reshape((-1,) + (1,) * len(spatial)) - 1
    inside = (raw >= 0) & (raw <= hi)
    c = np.clip(raw, 0, hi)
    i0 = np.minimum(np.floor(c), hi - 1).astype(np.intp)
    t = c - i0
    return spatial, i0, t, inside


def warp_image(moving, field) -> Tensor:
    """Resample ``moving [C, *sp]`` at ``x + field(x)``; differentiable in both inputs."""
    img = as_tensor(moving)
    fld = as_tensor(field)
    d = fld.shape[0]
    if fld.ndim != d + 1 or img.ndim != d + 1 or img.shape[1:] != fld.shape[1:]:
        raise ShapeError(f"warp_image: image {img.shape} and field {fld.shape} disagree")
    spatial, i0, t, inside = _interp_setup(fld.data)
    n_ch = img.shape[0]
    npix = int(np.prod(spatial))
    flat_img = img.data.reshape(n_ch, npix)

    corners = []
    for bits in product((0, 1), repeat=d):
        w = np.ones(spatial)
        for k, b in enumerate(bits):
            w = w * (t[k] if b else 1.0 - t[k])
        flat_idx = np.ravel_multi_index(tuple(i0[k] + b for k, b in enumerate(bits)), spatial).ravel()
        corners.append((bits, w.ravel(), flat_idx))

    out = np.zeros((n_ch, npix))
    for _, w, idx in corners:
        out += w * flat_img[:, idx]

    def vjp(g):
        gflat = g.reshape(n_ch, npix)
        g_img = g_fld = None
        if img.requires_grad:
            all_idx = np.concatenate([idx for _, _, idx in corners])
            g_img = np.empty((n_ch, npix))
            for c in range(n_ch):
                wg = np.concatenate([w * gflat[c] for _, w, _ in corners])
                g_img[c] = np.bincount(all_idx, weights=wg, minlength=npix)
            g_img = g_img.reshape(img.shape)
        if fld.requires_grad:
            g_fld = np.zeros((d, npix))
            for bits, _, idx in corners:
                vals = (gflat * flat_img[:, idx]).sum(axis=0)
                for k in range(d):
                    dw = np.ones(npix)
                    for j, b in enumerate(bits):
                        if j == k:
                            dw = dw * (1.0 if b else -1.0)
                        else:
                            tj = t[j].ravel()
                            dw = dw * (tj if b else 1.0 - tj)
                    g_fld[k] += dw * vals
            g_fld = g_fld.reshape(fld.shape) * inside
        return g_img, g_fld

    return record_op("warp_image", out.reshape(img.shape), (img, fld), vjp)


def compose_displacements(first, second) -> Tensor:
    """Field of ``warp(warp(I, first), second)``: ``second(x) + first(x + second(x))``."""
    first, second = as_tensor(first), as_tensor(second)
    if first.shape != second.shape:
        raise ShapeError(f"compose: shape mismatch {first.shape} vs {second.shape}")
    return add(second, warp_image(first, second))
