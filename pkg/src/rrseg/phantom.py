"""Synthetic 4-channel phantom volumes with three nested tumour regions.

Each case is a brain-like ellipsoid of textured tissue on an exactly-zero
background, containing nested WT > TC > ET ellipsoids (labels 2 / 1 / 4 for
the edema ring, core ring, and enhancing centre).  The four channels mimic
the information layout of multimodal MRI: channel 3 ("FLAIR-like") is bright
over the whole tumour, channel 1 ("T1c-like") highlights the enhancing
centre, and channel 2 ("T2-like") partially duplicates channel 3 so the
redundancy-reduction loss has signal to act on.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import errors
from .volume import LabelMask, Volume, write_rvol

# per-channel intensity profile: value = base + gain_region for the innermost
# region containing the voxel (regions add up via nesting flags below)
DEFAULT_BASE = (0.40, 0.30, 0.35, 0.20)
DEFAULT_WT_GAIN = (0.10, 0.00, 0.30, 0.80)
DEFAULT_TC_GAIN = (0.10, 0.05, 0.45, 0.00)
DEFAULT_ET_GAIN = (0.05, 0.80, 0.00, 0.00)


@dataclass
class PhantomConfig:
    dims: tuple[int, int, int] = (32, 32, 32)
    count: int = 10
    seed: int = 0
    wt_radius_range: tuple[float, float] = (7.5, 9.5)
    tc_fraction_range: tuple[float, float] = (0.70, 0.80)
    et_fraction_range: tuple[float, float] = (0.65, 0.78)
    center_jitter: float = 5.0
    noise_std: float = 0.03
    texture_scale: float = 0.02
    texture_grid: int = 4
    base: tuple[float, ...] = DEFAULT_BASE
    wt_gain: tuple[float, ...] = DEFAULT_WT_GAIN
    tc_gain: tuple[float, ...] = DEFAULT_TC_GAIN
    et_gain: tuple[float, ...] = DEFAULT_ET_GAIN

    @classmethod
    def for_edge(cls, edge: int, count: int = 10, seed: int = 0,
                 oracle: bool = False) -> "PhantomConfig":
        """Defaults for a cubic volume of the given edge, radii scaled from 32."""
        cfg = cls.oracle_learnable(count, seed) if oracle else cls(count=count, seed=seed)
        s = edge / 32.0
        cfg.dims = (edge, edge, edge)
        cfg.wt_radius_range = tuple(r * s for r in cfg.wt_radius_range)
        cfg.center_jitter *= s
        return cfg

    @classmethod
    def oracle_learnable(cls, count: int = 10, seed: int = 0) -> "PhantomConfig":
        """Degenerate mode: no noise, no texture, fixed geometry.

        Thresholding channel 3 at 0.5 recovers WT exactly (0.2 outside,
        0.8 inside), giving a known-learnable upper bound for the pipeline.
        """
        return cls(
            count=count, seed=seed,
            wt_radius_range=(9.0, 9.0),
            tc_fraction_range=(0.65, 0.65),
            et_fraction_range=(0.60, 0.60),
            center_jitter=0.0, noise_std=0.0, texture_scale=0.0,
        )

    def validate(self) -> None:
        if min(self.dims) < 8:
            raise errors.InvalidConfig(f"dims too small: {self.dims}")
        if self.count < 1:
            raise errors.InvalidConfig("count must be >= 1")
        if self.wt_radius_range[0] > self.wt_radius_range[1]:
            raise errors.InvalidConfig("wt_radius_range not well-ordered")
        if self.wt_radius_range[1] > min(self.dims) / 2.5:
            raise errors.InvalidConfig("tumour radius too large for the volume")


def _ellipsoid(coords, center, semi) -> np.ndarray:
    zz, yy, xx = coords
    cz, cy, cx = center
    az, ay, ax = semi
    return ((zz - cz) / az) ** 2 + ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0


def generate_case(cfg: PhantomConfig, case_seed: int) -> tuple[Volume, LabelMask]:
    """One deterministic case; the rng is derived from (cfg.seed, case_seed)."""
    cfg.validate()
    rng = np.random.default_rng((cfg.seed, case_seed))
    dx, dy, dz = cfg.dims
    coords = np.meshgrid(
        np.arange(dz, dtype=np.float64),
        np.arange(dy, dtype=np.float64),
        np.arange(dx, dtype=np.float64),
        indexing="ij",
    )
    # brain fills most of the domain (corners stay zero); a near-constant
    # tissue fraction keeps instance-norm statistics stable between random
    # training crops and whole-volume inference
    brain_semi = np.array([dz, dy, dx]) * 0.80
    brain = _ellipsoid(coords, center=np.array([dz / 2, dy / 2, dx / 2]), semi=brain_semi)

    wt_semi = rng.uniform(*cfg.wt_radius_range, size=3)
    # tumour placed uniformly, clamped so WT stays inside brain and volume
    half = np.array([dz, dy, dx]) / 2.0
    room = np.maximum(np.minimum(brain_semi, half) - wt_semi - 1.0, 0.0)
    jitter = np.minimum(room, cfg.center_jitter)
    center = half + rng.uniform(-jitter, jitter, 3)
    tc_semi = np.clip(wt_semi * rng.uniform(*cfg.tc_fraction_range, size=3),
                      2.4, wt_semi - 1.0)
    et_semi = np.clip(tc_semi * rng.uniform(*cfg.et_fraction_range, size=3),
                      1.4, tc_semi - 1.0)
    wt = _ellipsoid(coords, center, wt_semi) & brain
    tc = _ellipsoid(coords, center, tc_semi) & brain
    et = _ellipsoid(coords, center, et_semi) & brain

    labels = np.zeros((dz, dy, dx), np.uint8)
    labels[wt] = 2
    labels[tc] = 1
    labels[et] = 4

    img = np.zeros((4, dz, dy, dx), np.float32)
    for c in range(4):
        ch = np.full((dz, dy, dx), cfg.base[c], np.float64)
        ch[wt] += cfg.wt_gain[c]
        ch[tc] += cfg.tc_gain[c]
        ch[et] += cfg.et_gain[c]
        if cfg.texture_scale > 0:
            g = cfg.texture_grid
            coarse = rng.standard_normal((g, g, g))
            reps = (-(-dz // g), -(-dy // g), -(-dx // g))
            tex = np.repeat(np.repeat(np.repeat(coarse, reps[0], 0), reps[1], 1), reps[2], 2)
            ch += cfg.texture_scale * tex[:dz, :dy, :dx]
        if cfg.noise_std > 0:
            ch += cfg.noise_std * rng.standard_normal((dz, dy, dx))
        ch[~brain] = 0.0
        img[c] = ch.astype(np.float32)
    return Volume(img), LabelMask(labels)


MANIFEST_HEADER = ("case_id", "image_path", "label_path")


def generate_dataset(cfg: PhantomConfig, out_dir) -> Path:
    """Write `count` cases plus a manifest CSV; returns the manifest path."""
    cfg.validate()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for i in range(cfg.count):
            case_id = f"case_{i:04d}"
            vol, mask = generate_case(cfg, i)
            img_name = f"{case_id}_img.rvol"
            msk_name = f"{case_id}_msk.rvol"
            write_rvol(vol, out / img_name)
            write_rvol(mask, out / msk_name)
            rows.append((case_id, img_name, msk_name))
        manifest = out / "manifest.csv"
        with open(manifest, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(MANIFEST_HEADER)
            writer.writerows(rows)
    except OSError as err:
        raise errors.IoError(f"cannot write dataset to {out}: {err}") from err
    return manifest
