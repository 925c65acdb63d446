"""Dense multi-channel 3D volumes, label masks, preprocessing, and RVOL IO.

Array layout convention: a Volume stores float32 data with shape
(channels, dz, dy, dx), i.e. voxel (x, y, z) of channel c lives at
data[c, z, y, x].  That matches the on-disk RVOL payload order
(channel-major, then z, y, x with x fastest), so IO is a straight memory
copy.  The `dims` attribute is always reported as (dx, dy, dz).
"""
from __future__ import annotations

import struct

import numpy as np

from . import errors

_AXES = {"x": 3, "y": 2, "z": 1}

RVOL_MAGIC = b"RVOL"
RVOL_VERSION = 1
_DTYPE_CODES = {0: np.float32, 1: np.uint8}
_CODE_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}


class Volume:
    """Immutable-by-convention container for a multi-channel scalar field."""

    def __init__(self, data: np.ndarray):
        data = np.asarray(data)
        if data.ndim != 4:
            raise errors.ShapeMismatch(f"volume data must be 4-d (c,z,y,x), got {data.shape}")
        if data.dtype != np.float32:
            data = data.astype(np.float32)
        if min(data.shape) < 1:
            raise errors.ShapeMismatch(f"degenerate volume shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("volume contains non-finite values")
        self.data = np.ascontiguousarray(data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        c, dz, dy, dx = self.data.shape
        return (dx, dy, dz)

    def __eq__(self, other):
        return (
            isinstance(other, Volume)
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self):
        return f"Volume(channels={self.channels}, dims={self.dims})"


class LabelMask:
    """Segmentation mask: either per-voxel labels or the nested 3-channel form.

    Label form has shape (dz, dy, dx) with BraTS vocabulary {0, 1, 2, 4};
    region form has shape (3, dz, dy, dx) with binary channels ordered
    (WT, TC, ET) satisfying ET <= TC <= WT voxelwise.
    """

    LABEL_VOCAB = (0, 1, 2, 4)
    REGION_NAMES = ("wt", "tc", "et")

    def __init__(self, data: np.ndarray):
        data = np.asarray(data)
        if data.ndim not in (3, 4):
            raise errors.ShapeMismatch(f"mask data must be 3-d or 4-d, got {data.shape}")
        if data.ndim == 4 and data.shape[0] != 3:
            raise errors.ShapeMismatch(f"region-form mask needs 3 channels, got {data.shape[0]}")
        self.data = np.ascontiguousarray(data.astype(np.uint8))

    @property
    def is_regions(self) -> bool:
        return self.data.ndim == 4

    @property
    def dims(self) -> tuple[int, int, int]:
        dz, dy, dx = self.data.shape[-3:]
        return (dx, dy, dz)

    def check_nesting(self) -> bool:
        if not self.is_regions:
            raise errors.ShapeMismatch("nesting is defined for region-form masks only")
        wt, tc, et = self.data[0], self.data[1], self.data[2]
        return bool(np.all(et <= tc) and np.all(tc <= wt))

    def __eq__(self, other):
        return (
            isinstance(other, LabelMask)
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self):
        form = "regions" if self.is_regions else "labels"
        return f"LabelMask({form}, dims={self.dims})"


def normalize_nonzero(v: Volume) -> Volume:
    """Standardise each channel over its non-zero voxels; zeros stay zero.

    Uses the population standard deviation with float64 accumulation.
    """
    out = np.zeros_like(v.data)
    for c in range(v.channels):
        ch = v.data[c]
        nz = ch != 0
        n = int(nz.sum())
        if n == 0:
            raise errors.AllZeroChannel(f"channel {c} has no non-zero voxel")
        vals = ch[nz].astype(np.float64)
        mu = vals.mean()
        sigma = vals.std()
        if sigma < 1e-12:
            raise errors.ConstantChannel(f"channel {c} non-zero voxels are constant")
        out[c][nz] = ((vals - mu) / sigma).astype(np.float32)
    return Volume(out)


def flip_axis(v: Volume, axis: str) -> Volume:
    """Mirror the volume along one spatial axis ('x', 'y' or 'z')."""
    if axis not in _AXES:
        raise errors.ShapeMismatch(f"axis must be one of x/y/z, got {axis!r}")
    return Volume(np.flip(v.data, axis=_AXES[axis]).copy())


def flip_mask_axis(m: LabelMask, axis: str) -> LabelMask:
    if axis not in _AXES:
        raise errors.ShapeMismatch(f"axis must be one of x/y/z, got {axis!r}")
    ax = _AXES[axis] if m.is_regions else _AXES[axis] - 1
    return LabelMask(np.flip(m.data, axis=ax).copy())


def random_crop(v: Volume, m: LabelMask, size: tuple[int, int, int],
                rng: np.random.Generator) -> tuple[Volume, LabelMask]:
    """Crop image and mask with a shared uniformly-drawn offset.

    `size` is (cx, cy, cz); offsets are drawn in x, y, z order.
    """
    cx, cy, cz = size
    dx, dy, dz = v.dims
    if v.dims != m.dims:
        raise errors.ShapeMismatch(f"image dims {v.dims} != mask dims {m.dims}")
    if cx > dx or cy > dy or cz > dz:
        raise errors.CropTooLarge(f"crop {size} exceeds dims {v.dims}")
    ox = int(rng.integers(0, dx - cx + 1))
    oy = int(rng.integers(0, dy - cy + 1))
    oz = int(rng.integers(0, dz - cz + 1))
    img = v.data[:, oz:oz + cz, oy:oy + cy, ox:ox + cx]
    if m.is_regions:
        msk = m.data[:, oz:oz + cz, oy:oy + cy, ox:ox + cx]
    else:
        msk = m.data[oz:oz + cz, oy:oy + cy, ox:ox + cx]
    return Volume(img.copy()), LabelMask(msk.copy())


def labels_to_regions(m: LabelMask) -> LabelMask:
    """Convert BraTS labels {0,1,2,4} to the nested (WT, TC, ET) binary form.

    WT = {1,2,4}, TC = {1,4}, ET = {4}.
    """
    if m.is_regions:
        return m
    lab = m.data
    known = np.isin(lab, LabelMask.LABEL_VOCAB)
    if not known.all():
        bad = sorted(int(u) for u in np.unique(lab[~known]))
        raise errors.UnknownLabel(f"unknown labels {bad}; expected subset of {{0,1,2,4}}")
    wt = np.isin(lab, (1, 2, 4))
    tc = np.isin(lab, (1, 4))
    et = lab == 4
    return LabelMask(np.stack([wt, tc, et]).astype(np.uint8))


# -- RVOL binary format -------------------------------------------------------

def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise errors.TruncatedFile(f"file ends inside {what}")
    return buf


def write_rvol(obj: Volume | LabelMask, path) -> None:
    """Write a Volume (float32) or LabelMask (uint8) in the RVOL container.

    Little-endian header: magic 'RVOL', version u32, dtype u32 (0=float32,
    1=uint8), channels u32, dx u32, dy u32, dz u32; then the raw payload in
    channel-major z,y,x order with x fastest.  No padding, no compression.
    """
    if isinstance(obj, Volume):
        data = obj.data
        channels = obj.channels
    elif isinstance(obj, LabelMask):
        data = obj.data if obj.is_regions else obj.data[None]
        channels = data.shape[0]
    else:
        raise errors.IoError(f"cannot serialise {type(obj).__name__} as RVOL")
    dx, dy, dz = obj.dims
    code = _CODE_FOR_DTYPE[data.dtype]
    try:
        with open(path, "wb") as fh:
            fh.write(RVOL_MAGIC)
            fh.write(struct.pack("<6I", RVOL_VERSION, code, channels, dx, dy, dz))
            fh.write(np.ascontiguousarray(data).tobytes())
    except OSError as err:
        raise errors.IoError(f"cannot write {path}: {err}") from err


def read_rvol(path) -> Volume | LabelMask:
    """Read an RVOL file; float32 payloads load as Volume, uint8 as LabelMask."""
    try:
        fh = open(path, "rb")
    except OSError as err:
        raise errors.IoError(f"cannot read {path}: {err}") from err
    with fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != RVOL_MAGIC:
            raise errors.BadMagic(f"bad magic {magic!r}, expected {RVOL_MAGIC!r}")
        version, code, channels, dx, dy, dz = struct.unpack(
            "<6I", _read_exact(fh, 24, "header")
        )
        if version != RVOL_VERSION:
            raise errors.UnsupportedVersion(f"RVOL version {version} not supported")
        if code not in _DTYPE_CODES:
            raise errors.UnsupportedVersion(f"unknown dtype code {code}")
        dtype = np.dtype(_DTYPE_CODES[code])
        count = channels * dx * dy * dz
        payload = _read_exact(fh, count * dtype.itemsize, "data payload")
        if fh.read(1):
            raise errors.IoError(f"{path}: trailing bytes after payload")
    data = np.frombuffer(payload, dtype=dtype).reshape(channels, dz, dy, dx).copy()
    if code == 0:
        return Volume(data)
    return LabelMask(data[0] if channels == 1 else data)
