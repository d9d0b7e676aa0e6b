"""Encoder-decoder registration network shared by the forward and backward roles.

Layout for spatial rank d (kernel 3 per axis everywhere)::

    input  = concat(moving, fixed)                      2 ch, n
    enc_k  = lrelu(conv_s2(enc_{k-1}))   k = 1..4       n / 2^k
    dec_1  = lrelu(conv(concat(up(enc_4), enc_3)))       n / 8
    dec_2  = lrelu(conv(concat(up(dec_1), enc_2)))       n / 4
    dec_3  = lrelu(conv(concat(up(dec_2), enc_1)))       n / 2
    dec_4  = lrelu(conv(concat(up(dec_3), input)))       n
    refine = three lrelu convs, then a linear conv to d channels

Every spatial extent must therefore be divisible by 16.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, as_tensor

__all__ = ["NetWidths", "ConvLayer", "RegNetParams", "init_params", "regnet_forward", "count_params"]

LEAK = 0.2
FINAL_INIT_SCALE = 1e-5


@dataclass(frozen=True)
class NetWidths:
    encoder: tuple = (16, 32, 32, 32)
    decoder: tuple = (32, 32, 32, 32)
    refine: tuple = (16, 16, 16)

    def __post_init__(self):
        for name, want in (("encoder", 4), ("decoder", 4), ("refine", 3)):
            widths = tuple(int(w) for w in getattr(self, name))
            if len(widths) != want or any(w < 1 for w in widths):
                raise ValueError(f"{name} needs {want} positive widths, got {getattr(self, name)}")
            object.__setattr__(self, name, widths)

    def as_list(self) -> list:
        return list(self.encoder) + list(self.decoder) + list(self.refine)

    @classmethod
    def from_list(cls, widths: Sequence[int]) -> "NetWidths":
        w = list(widths)
        if len(w) != 11:
            raise ValueError(f"expected 11 widths, got {len(w)}")
        return cls(tuple(w[:4]), tuple(w[4:8]), tuple(w[8:]))

    def layer_channels(self, ndim: int) -> List[tuple]:
        """(in, out, stride) for all twelve conv layers in forward order."""
        enc, dec, ref = self.encoder, self.decoder, self.refine
        layers = []
        c = 2
        for w in enc:
            layers.append((c, w, 2))
            c = w
        skips = [enc[2], enc[1], enc[0], 2]
        for w, s in zip(dec, skips):
            layers.append((c + s, w, 1))
            c = w
        for w in ref:
            layers.append((c, w, 1))
            c = w
        layers.append((c, ndim, 1))
        return layers


@dataclass
class ConvLayer:
    weight: Tensor
    bias: Tensor
    stride: int


@dataclass
class RegNetParams:
    ndim: int
    widths: NetWidths
    layers: List[ConvLayer] = field(default_factory=list)

    def tensors(self) -> List[Tensor]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def arrays(self) -> List[np.ndarray]:
        return [t.data for t in self.tensors()]

    def with_arrays(self, arrays: Sequence[np.ndarray], requires_grad: bool = True) -> "RegNetParams":
        arrays = list(arrays)
        if len(arrays) != 2 * len(self.layers):
            raise ValueError("parameter block count mismatch")
        layers = []
        for i, layer in enumerate(self.layers):
            w, b = arrays[2 * i], arrays[2 * i + 1]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ShapeError(f"layer {i}: got {w.shape}/{b.shape}, expected {layer.weight.shape}/{layer.bias.shape}")
            layers.append(
                ConvLayer(
                    Tensor(np.array(w, dtype=np.float64), requires_grad=requires_grad),
                    Tensor(np.array(b, dtype=np.float64), requires_grad=requires_grad),
                    layer.stride,
                )
            )
        return RegNetParams(self.ndim, self.widths, layers)

    def frozen(self) -> "RegNetParams":
        """Copy whose tensors are excluded from gradient tracking."""
        return self.with_arrays(self.arrays(), requires_grad=False)

    def copy(self) -> "RegNetParams":
        return self.with_arrays(self.arrays(), requires_grad=True)


def init_params(ndim: int = 2, widths: NetWidths = NetWidths(), seed: int = 0) -> RegNetParams:
    """He-uniform hidden layers and zero biases; the last layer is scaled by 1e-5."""
    if ndim not in (2, 3):
        raise ValueError(f"ndim must be 2 or 3, got {ndim}")
    rng = np.random.default_rng(seed)
    specs = widths.layer_channels(ndim)
    layers = []
    for i, (c_in, c_out, stride) in enumerate(specs):
        fan_in = c_in * 3**ndim
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(c_out, c_in) + (3,) * ndim)
        b = np.zeros(c_out)
        if i == len(specs) - 1:
            w *= FINAL_INIT_SCALE
            b *= FINAL_INIT_SCALE
        layers.append(ConvLayer(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True), stride))
    return RegNetParams(ndim, widths, layers)


def count_params(params_or_widths, ndim: int = 2) -> int:
    if isinstance(params_or_widths, RegNetParams):
        return int(sum(t.data.size for t in params_or_widths.tensors()))
    widths = params_or_widths
    return int(sum(c_out * c_in * 3**ndim + c_out for c_in, c_out, _ in widths.layer_channels(ndim)))


def regnet_forward(moving, fixed, params: RegNetParams) -> Tensor:
    """Displacement field ``[d, *spatial]`` predicted for a (moving, fixed) pair."""
    moving, fixed = as_tensor(moving), as_tensor(fixed)
    if moving.shape != fixed.shape:
        raise ShapeError(f"regnet_forward: moving {moving.shape} vs fixed {fixed.shape}")
    if moving.ndim - 1 != params.ndim:
        raise ShapeError(f"network is {params.ndim}D but inputs have shape {moving.shape}")
    if any(n % 16 for n in moving.shape[1:]):
        raise ShapeError(f"spatial extents {moving.shape[1:]} must be divisible by 16")

    layers = params.layers

    def block(x, layer, act=True):
        y = T.conv(x, layer.weight, layer.bias, stride=layer.stride)
        return T.leaky_relu(y, LEAK) if act else y

    x0 = T.concat_channels(moving, fixed)
    enc = [x0]
    for layer in layers[:4]:
        enc.append(block(enc[-1], layer))
    x = enc[4]
    for layer, skip in zip(layers[4:8], (enc[3], enc[2], enc[1], enc[0])):
        x = block(T.concat_channels(T.upsample_nearest(x), skip), layer)
    for layer in layers[8:11]:
        x = block(x, layer)
    return block(x, layers[11], act=False)
