"""Twin-batch construction: shared mirror flips, then two independently
perturbed copies of the same image.

Spatial augmentation is integer translation only; anything stronger would
break the row-for-row correspondence between the twins' pooled projection
regions that the cross-correlation loss relies on.  Masks follow their
twin's spatial transform and are never intensity-transformed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import errors
from .volume import LabelMask, Volume, flip_axis, flip_mask_axis


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    intensity_scale_range: tuple[float, float] = (0.9, 1.1)
    intensity_shift_range: tuple[float, float] = (-0.1, 0.1)
    spatial_shift_voxels: int = 2
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.flip_prob <= 1.0:
            raise errors.InvalidConfig(f"flip_prob must be in [0,1], got {self.flip_prob}")
        for name in ("intensity_scale_range", "intensity_shift_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise errors.InvalidConfig(f"{name} is not well-ordered: ({lo}, {hi})")
        if self.spatial_shift_voxels < 0:
            raise errors.InvalidConfig("spatial_shift_voxels must be >= 0")


def mirror_flip_shared(v: Volume, m: LabelMask, rng: np.random.Generator,
                       flip_prob: float = 0.5) -> tuple[Volume, LabelMask]:
    """Flip image and mask together along each axis with probability flip_prob."""
    for axis in ("x", "y", "z"):
        if rng.random() < flip_prob:
            v = flip_axis(v, axis)
            m = flip_mask_axis(m, axis)
    return v, m


def _shift_array(data: np.ndarray, offsets_xyz: tuple[int, int, int],
                 spatial_start: int) -> np.ndarray:
    """Translate by integer voxels, zero-filling uncovered space.

    offsets are (ox, oy, oz): content at (x, y, z) moves to (x+ox, y+oy, z+oz).
    """
    out = np.zeros_like(data)
    src = [slice(None)] * data.ndim
    dst = [slice(None)] * data.ndim
    # array axes run z, y, x after the leading channel axes
    for axis_offset, off in zip((2, 1, 0), offsets_xyz):
        ax = spatial_start + axis_offset
        n = data.shape[ax]
        if abs(off) >= n:
            return out
        if off >= 0:
            src[ax] = slice(0, n - off)
            dst[ax] = slice(off, n)
        else:
            src[ax] = slice(-off, n)
            dst[ax] = slice(0, n + off)
    out[tuple(dst)] = data[tuple(src)]
    return out


def _augment_one(v: Volume, m: LabelMask, cfg: AugmentConfig,
                 rng: np.random.Generator) -> tuple[Volume, LabelMask]:
    scales = rng.uniform(*cfg.intensity_scale_range, size=v.channels)
    shifts = rng.uniform(*cfg.intensity_shift_range, size=v.channels)
    s = cfg.spatial_shift_voxels
    offsets = tuple(int(o) for o in rng.integers(-s, s + 1, size=3)) if s else (0, 0, 0)
    img = v.data * scales[:, None, None, None].astype(np.float32) \
        + shifts[:, None, None, None].astype(np.float32)
    if any(offsets):
        img = _shift_array(img, offsets, spatial_start=1)
        msk = _shift_array(m.data, offsets, spatial_start=1 if m.is_regions else 0)
    else:
        msk = m.data
    return Volume(img), LabelMask(msk)


def make_twin_batch(v: Volume, m: LabelMask, cfg: AugmentConfig,
                    rng: np.random.Generator):
    """Two independently augmented copies of (v, m).

    Returns (twin_a, twin_b, mask_a, mask_b); each mask carries exactly the
    spatial transform of its twin.
    """
    cfg.validate()
    twin_a, mask_a = _augment_one(v, m, cfg, rng)
    twin_b, mask_b = _augment_one(v, m, cfg, rng)
    return twin_a, twin_b, mask_a, mask_b
