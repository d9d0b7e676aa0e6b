"""Binary volume and checkpoint files, key=value configs and run manifests.

Volume file (little-endian)::

    b"VREG" | u16 version | u8 ndim | u32 extent * ndim | f64 spacing * ndim
    | u8 kind | payload

kind 0 is a scalar volume (f32), 1 a displacement field with a leading
component axis of length ndim (f32), 2 an integer label map (u16). The payload
is row-major and its length must match the header exactly.

Checkpoint file (little-endian)::

    b"VREGCKPT" | u16 version | u8 role | u8 ndim | u8 n_widths | u32 width * n
    | u32 n_blocks | per block: u8 rank, u32 dim * rank, f32 data
    | u32 n_bytes, utf-8 key=value config echo | u64 seed | f64 final loss

Values are stored in single precision, so a network reloaded from a
checkpoint matches the trained one only to float32 rounding.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .net import NetWidths, RegNetParams, count_params, init_params

__all__ = [
    "FormatError",
    "VersionError",
    "ConfigError",
    "VolumeFile",
    "write_volume",
    "read_volume",
    "Checkpoint",
    "write_checkpoint",
    "read_checkpoint",
    "parse_config",
    "write_manifest",
]

VOLUME_MAGIC = b"VREG"
CKPT_MAGIC = b"VREGCKPT"
VOLUME_VERSION = 1
CKPT_VERSION = 1
SCALAR, FIELD, LABELS = 0, 1, 2
ROLES = ("forward", "backward")


class FormatError(ValueError):
    """File does not follow the expected binary layout."""


class VersionError(FormatError):
    pass


class ConfigError(ValueError):
    pass


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated (wanted {n} bytes at offset {self.pos})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(count * dt.itemsize), dtype=dt, count=count)

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{self.what}: {len(self.buf) - self.pos} trailing bytes")


# -- volumes --------------------------------------------------------------------


@dataclass
class VolumeFile:
    data: np.ndarray
    kind: int = SCALAR
    spacing: Tuple[float, ...] = None

    def __post_init__(self):
        if self.kind not in (SCALAR, FIELD, LABELS):
            raise FormatError(f"unknown payload kind {self.kind}")
        nd = self.data.ndim - (1 if self.kind == FIELD else 0)
        if nd not in (2, 3):
            raise FormatError(f"volumes must be 2D or 3D, got array of shape {self.data.shape}")
        if self.kind == FIELD and self.data.shape[0] != nd:
            raise FormatError(f"field needs {nd} components, got {self.data.shape[0]}")
        self.spacing = (1.0,) * nd if self.spacing is None else tuple(float(s) for s in self.spacing)
        if len(self.spacing) != nd:
            raise FormatError(f"spacing {self.spacing} does not match {nd}D volume")

    @property
    def extents(self) -> tuple:
        return self.data.shape[1:] if self.kind == FIELD else self.data.shape


def volume_bytes(vol: VolumeFile) -> bytes:
    ext = vol.extents
    out = io.BytesIO()
    out.write(VOLUME_MAGIC)
    out.write(struct.pack(f"<HB{len(ext)}I{len(ext)}dB", VOLUME_VERSION, len(ext), *ext, *vol.spacing, vol.kind))
    if vol.kind == LABELS:
        lab = np.asarray(vol.data)
        if lab.min() < 0 or lab.max() > 0xFFFF:
            raise FormatError("label ids must fit in u16")
        out.write(lab.astype("<u2").tobytes())
    else:
        out.write(np.asarray(vol.data).astype("<f4").tobytes())
    return out.getvalue()


def write_volume(path, data, kind: int = SCALAR, spacing=None) -> Path:
    vol = data if isinstance(data, VolumeFile) else VolumeFile(np.asarray(data), kind, spacing)
    path = Path(path)
    path.write_bytes(volume_bytes(vol))
    return path


def read_volume(path) -> VolumeFile:
    """Labels come back as int64, scalars and fields as float64."""
    r = _Reader(Path(path).read_bytes(), str(path))
    if r.take(4) != VOLUME_MAGIC:
        raise FormatError(f"{path}: not a volume file")
    version = r.unpack("H")
    if version != VOLUME_VERSION:
        raise VersionError(f"{path}: volume format version {version}, expected {VOLUME_VERSION}")
    nd = r.unpack("B")
    if nd not in (2, 3):
        raise FormatError(f"{path}: ndim {nd}")
    ext = tuple(int(v) for v in np.atleast_1d(r.unpack(f"{nd}I")))
    spacing = tuple(float(v) for v in np.atleast_1d(r.unpack(f"{nd}d")))
    kind = r.unpack("B")
    shape = ((nd,) if kind == FIELD else ()) + ext
    count = int(np.prod(shape))
    if kind == LABELS:
        data = r.array("u2", count).reshape(shape).astype(np.int64)
    elif kind in (SCALAR, FIELD):
        data = r.array("f4", count).reshape(shape).astype(np.float64)
    else:
        raise FormatError(f"{path}: unknown payload kind {kind}")
    r.done()
    return VolumeFile(data, kind, spacing)


# -- checkpoints ----------------------------------------------------------------


@dataclass
class Checkpoint:
    role: str
    params: RegNetParams
    config: Dict[str, str] = field(default_factory=dict)
    seed: int = 0
    final_loss: float = float("nan")


def write_checkpoint(path, ckpt: Checkpoint) -> Path:
    if ckpt.role not in ROLES:
        raise FormatError(f"unknown network role '{ckpt.role}'")
    params = ckpt.params
    widths = params.widths.as_list()
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack(f"<HBBB{len(widths)}I", CKPT_VERSION, ROLES.index(ckpt.role), params.ndim, len(widths), *widths))
    arrays = params.arrays()
    out.write(struct.pack("<I", len(arrays)))
    for a in arrays:
        out.write(struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape))
        out.write(a.astype("<f4").tobytes())
    text = "".join(f"{k}={v}\n" for k, v in ckpt.config.items()).encode("utf-8")
    out.write(struct.pack("<I", len(text)))
    out.write(text)
    out.write(struct.pack("<Qd", ckpt.seed, ckpt.final_loss))
    path = Path(path)
    path.write_bytes(out.getvalue())
    return path


def read_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), str(path))
    if r.take(8) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version = r.unpack("H")
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    role_id, ndim, n_widths = r.unpack("BBB")
    if role_id >= len(ROLES):
        raise FormatError(f"{path}: unknown role tag {role_id}")
    widths = NetWidths.from_list(np.atleast_1d(r.unpack(f"{n_widths}I")))
    arrays = []
    for _ in range(r.unpack("I")):
        rank = r.unpack("B")
        shape = tuple(int(v) for v in np.atleast_1d(r.unpack(f"{rank}I")))
        arrays.append(r.array("f4", int(np.prod(shape))).reshape(shape).astype(np.float64))
    total = sum(a.size for a in arrays)
    expected = count_params(widths, ndim)
    if total != expected:
        raise FormatError(f"{path}: {total} parameters stored, widths imply {expected}")
    config = parse_config_text(r.take(r.unpack("I")).decode("utf-8"))
    seed, final_loss = r.unpack("Qd")
    r.done()
    params = init_params(ndim, widths, seed=0).with_arrays(arrays)
    return Checkpoint(ROLES[role_id], params, config, int(seed), float(final_loss))


# -- configs and manifests ------------------------------------------------------


def parse_config_text(text: str, source: str = "config") -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Repeated keys are rejected."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got '{raw.strip()}'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out and out[key] != value:
            raise ConfigError(f"{source}:{lineno}: key '{key}' given twice with different values")
        out[key] = value
    return out


def parse_config(path) -> Dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))


def write_manifest(path, command: str, config: Dict[str, object], notes: Optional[Dict[str, str]] = None) -> Path:
    """Resolved config as key=value lines, readable back as a config file."""
    lines = [f"# command: {command}"]
    for k, v in (notes or {}).items():
        lines.append(f"# {k}: {v}")
    lines += [f"{k} = {v}" for k, v in sorted(config.items())]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
