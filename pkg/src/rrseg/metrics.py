"""Evaluation metrics: per-class Dice overlap and 95th-percentile Hausdorff
surface distance, plus the per-case/summary tables.

HD95 pools the directed nearest surface-to-surface distances from both
directions and takes the 95th percentile with linear interpolation.  Surface
voxels are foreground voxels with a 6-neighbour background voxel (volume
boundaries count as background).  The fast path uses an exact Euclidean
distance transform; tests hold it to the all-pairs brute-force definition.

An empty prediction against a non-empty truth (or vice versa) yields the
BraTS-community worst-case sentinel 373.13; two empty masks yield 0.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt

from . import errors

EMPTY_MASK_SENTINEL = 373.13


def dice_score(pred: np.ndarray, truth: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); both-empty masks score 1 by convention."""
    if pred.shape != truth.shape:
        raise errors.ShapeMismatch(f"dice_score: {pred.shape} vs {truth.shape}")
    a = pred.astype(bool)
    b = truth.astype(bool)
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with any 6-neighbour outside the foreground."""
    m = mask.astype(bool)
    interior = np.ones_like(m)
    for ax in range(m.ndim):
        lo = [slice(None)] * m.ndim
        hi = [slice(None)] * m.ndim
        lo[ax] = slice(None, -1)
        hi[ax] = slice(1, None)
        shifted_fwd = np.zeros_like(m)
        shifted_bwd = np.zeros_like(m)
        shifted_fwd[tuple(lo)] = m[tuple(hi)]
        shifted_bwd[tuple(hi)] = m[tuple(lo)]
        interior &= shifted_fwd & shifted_bwd
    return m & ~interior


def hausdorff95(pred: np.ndarray, truth: np.ndarray,
                spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
                empty_sentinel: float = EMPTY_MASK_SENTINEL) -> float:
    if pred.shape != truth.shape:
        raise errors.ShapeMismatch(f"hausdorff95: {pred.shape} vs {truth.shape}")
    a = pred.astype(bool)
    b = truth.astype(bool)
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return float(empty_sentinel)
    sa = surface_voxels(a)
    sb = surface_voxels(b)
    # exact EDT of "distance to the other mask's surface", sampled on surfaces
    dist_to_b = distance_transform_edt(~sb, sampling=spacing)
    dist_to_a = distance_transform_edt(~sa, sampling=spacing)
    pooled = np.concatenate([dist_to_b[sa], dist_to_a[sb]])
    return float(np.percentile(pooled, 95))


@dataclass
class CaseResult:
    case_id: str
    dice_et: float
    dice_tc: float
    dice_wt: float
    hd95_et: float
    hd95_tc: float
    hd95_wt: float

    FIELDS = ("dice_et", "dice_tc", "dice_wt", "hd95_et", "hd95_tc", "hd95_wt")

    def row(self) -> list:
        return [self.case_id] + [getattr(self, f) for f in self.FIELDS]


def evaluate_case(case_id: str, pred_regions: np.ndarray,
                  truth_regions: np.ndarray) -> CaseResult:
    """Metrics for one case; masks are (WT, TC, ET) binary stacks."""
    if pred_regions.shape != truth_regions.shape or pred_regions.shape[0] != 3:
        raise errors.ShapeMismatch(
            f"evaluate_case: {pred_regions.shape} vs {truth_regions.shape}"
        )
    vals = {}
    for name, ch in (("wt", 0), ("tc", 1), ("et", 2)):
        vals[f"dice_{name}"] = dice_score(pred_regions[ch], truth_regions[ch])
        vals[f"hd95_{name}"] = hausdorff95(pred_regions[ch], truth_regions[ch])
    return CaseResult(case_id=case_id, **vals)


def evaluate(pred_masks: dict[str, np.ndarray], truth_masks: dict[str, np.ndarray]
             ) -> tuple[list[CaseResult], dict[str, tuple[float, float]]]:
    """Per-case results plus mean/std per metric column.

    Every truth case must have a prediction; extra predictions are ignored.
    """
    results = []
    for case_id in truth_masks:
        if case_id not in pred_masks:
            raise errors.MissingCase(f"no prediction for case {case_id}")
        results.append(evaluate_case(case_id, pred_masks[case_id], truth_masks[case_id]))
    summary = {}
    for f in CaseResult.FIELDS:
        col = np.array([getattr(r, f) for r in results], np.float64)
        summary[f] = (float(col.mean()), float(col.std()))
    return results, summary


def write_results_csv(results: list[CaseResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("case_id",) + CaseResult.FIELDS)
        for r in results:
            w.writerow(r.row())


def write_summary_csv(summary: dict[str, tuple[float, float]], path) -> None:
    """One row per class with mean and std columns, Dice and HD95."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("class", "dice_mean", "dice_std", "hd95_mean", "hd95_std"))
        for name in ("et", "tc", "wt"):
            dm, ds = summary[f"dice_{name}"]
            hm, hs = summary[f"hd95_{name}"]
            w.writerow((name.upper(), dm, ds, hm, hs))


def read_results_csv(path) -> list[CaseResult]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        CaseResult(case_id=r["case_id"],
                   **{f: float(r[f]) for f in CaseResult.FIELDS})
        for r in rows
    ]
