"""Probability-map fusion: plain mean, geometric mean, and the
confidence-ranked variant.

The confidence of one probability map for one class is the mean predicted
probability over its own segmented region (voxels above threshold); a map
that segments nothing has no confidence.  Confidence ensembling keeps the
top half of the maps per class and averages only those.  The heuristic's
value is statistical: it tends to help on aggregate, not on every case.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import errors
from .volume import LabelMask, Volume

DEFAULT_THRESHOLD = 0.5


@dataclass
class ProbabilityMapSet:
    maps: list[Volume]
    model_ids: list[str]

    def __post_init__(self):
        if len(self.maps) < 1:
            raise errors.ShapeMismatch("ensemble needs at least one probability map")
        if len(self.model_ids) != len(self.maps):
            raise errors.ShapeMismatch(
                f"{len(self.maps)} maps but {len(self.model_ids)} model ids"
            )
        first = self.maps[0]
        for m in self.maps:
            if m.data.shape != first.data.shape:
                raise errors.ShapeMismatch(
                    f"map shapes differ: {m.data.shape} vs {first.data.shape}"
                )
            lo, hi = float(m.data.min()), float(m.data.max())
            if lo < 0.0 or hi > 1.0:
                raise errors.ShapeMismatch(
                    f"probability map values outside [0,1]: [{lo}, {hi}]"
                )

    @property
    def count(self) -> int:
        return len(self.maps)

    @property
    def channels(self) -> int:
        return self.maps[0].channels


@dataclass
class ChannelConfidence:
    model_id: str
    confidence: float | None
    selected: bool


@dataclass
class ConfidenceReport:
    """Per channel: confidence and selection flag for every map."""

    channels: dict[str, list[ChannelConfidence]]

    def to_json_dict(self) -> dict:
        return {
            ch: [
                {"model_id": e.model_id, "confidence": e.confidence, "selected": e.selected}
                for e in entries
            ]
            for ch, entries in self.channels.items()
        }


def confidence(pmap: Volume, channel: int,
               threshold: float = DEFAULT_THRESHOLD) -> float | None:
    """Mean probability over the segmented region; None if nothing segmented."""
    vals = pmap.data[channel]
    region = vals > threshold
    if not region.any():
        return None
    return float(vals[region].astype(np.float64).mean())


def ensemble_mean(pset: ProbabilityMapSet) -> Volume:
    """Voxelwise arithmetic mean across maps."""
    acc = np.zeros(pset.maps[0].data.shape, np.float64)
    for m in pset.maps:
        acc += m.data
    return Volume((acc / pset.count).astype(np.float32))


def ensemble_geomean(pset: ProbabilityMapSet) -> Volume:
    """Voxelwise geometric mean across maps (zero stays zero)."""
    acc = np.ones(pset.maps[0].data.shape, np.float64)
    for m in pset.maps:
        acc *= m.data
    return Volume(np.power(acc, 1.0 / pset.count).astype(np.float32))


def confidence_ensemble(pset: ProbabilityMapSet,
                        threshold: float = DEFAULT_THRESHOLD
                        ) -> tuple[Volume, ConfidenceReport]:
    """Average the top ceil(N/2) maps per class, ranked by confidence.

    Maps with undefined confidence rank last; ties break by input order.
    If fewer defined confidences exist than slots, only the defined ones are
    used; if none are defined the channel falls back to the plain mean.
    """
    n = pset.count
    keep = math.ceil(n / 2)
    fused = np.zeros(pset.maps[0].data.shape, np.float32)
    report: dict[str, list[ChannelConfidence]] = {}
    names = LabelMask.REGION_NAMES if pset.channels == 3 else [
        f"ch{c}" for c in range(pset.channels)
    ]
    for ch in range(pset.channels):
        confs = [confidence(m, ch, threshold) for m in pset.maps]
        defined = [i for i, c in enumerate(confs) if c is not None]
        ranked = sorted(defined, key=lambda i: (-confs[i], i))
        selected = ranked[:keep] if ranked else list(range(n))
        acc = np.zeros(fused.shape[1:], np.float64)
        for i in selected:
            acc += pset.maps[i].data[ch]
        fused[ch] = (acc / len(selected)).astype(np.float32)
        sel = set(selected)
        report[names[ch]] = [
            ChannelConfidence(pset.model_ids[i], confs[i], i in sel) for i in range(n)
        ]
    return Volume(fused), ConfidenceReport(report)


def binarize(pmap: Volume, threshold: float = DEFAULT_THRESHOLD) -> LabelMask:
    """Threshold each channel (strict >) and repair nesting by intersection.

    Channels are (WT, TC, ET): TC is intersected with WT, then ET with TC.
    """
    b = (pmap.data > threshold).astype(np.uint8)
    if b.shape[0] == 3:
        b[1] &= b[0]
        b[2] &= b[1]
    return LabelMask(b)
