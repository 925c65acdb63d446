import numpy as np
import pytest

from oracles import hd95_bruteforce
from rrseg import errors
from rrseg.metrics import (
    EMPTY_MASK_SENTINEL,
    dice_score,
    evaluate,
    evaluate_case,
    hausdorff95,
    read_results_csv,
    surface_voxels,
    write_results_csv,
    write_summary_csv,
)


def ball(shape, center, r):
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    d2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return (d2 <= r * r).astype(np.uint8)


class TestDiceScore:
    def test_identical_nonempty(self):
        m = ball((8, 8, 8), (4, 4, 4), 2.5)
        assert dice_score(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4, 4), np.uint8)
        b = np.zeros((4, 4, 4), np.uint8)
        a[0, 0, 0] = 1
        b[3, 3, 3] = 1
        assert dice_score(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((8,), np.uint8)
        b = np.zeros((8,), np.uint8)
        a[:4] = 1
        b[2:6] = 1
        assert dice_score(a, b) == 0.5

    def test_both_empty_is_one(self):
        z = np.zeros((3, 3, 3), np.uint8)
        assert dice_score(z, z) == 1.0

    def test_symmetry_and_flip_invariance(self):
        rng = np.random.default_rng(0)
        a = (rng.random((6, 6, 6)) > 0.6).astype(np.uint8)
        b = (rng.random((6, 6, 6)) > 0.6).astype(np.uint8)
        assert dice_score(a, b) == dice_score(b, a)
        assert dice_score(a[::-1], b[::-1]) == dice_score(a, b)

    def test_shape_guard(self):
        with pytest.raises(errors.ShapeMismatch):
            dice_score(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


class TestHausdorff95:
    def test_identical_masks_zero(self):
        m = ball((10, 10, 10), (5, 5, 5), 3)
        assert hausdorff95(m, m) == 0.0

    def test_two_single_voxels(self):
        a = np.zeros((8, 8, 8), np.uint8)
        b = np.zeros((8, 8, 8), np.uint8)
        a[2, 3, 3] = 1
        b[5, 3, 3] = 1
        assert hausdorff95(a, b) == pytest.approx(3.0, abs=1e-12)

    def test_empty_prediction_sentinel(self):
        empty = np.zeros((4, 4, 4), np.uint8)
        full = ball((4, 4, 4), (2, 2, 2), 1.2)
        assert hausdorff95(empty, full) == EMPTY_MASK_SENTINEL
        assert hausdorff95(full, empty) == EMPTY_MASK_SENTINEL
        assert hausdorff95(empty, empty) == 0.0

    def test_translation_invariance(self):
        a = ball((16, 16, 16), (6, 6, 6), 2.5)
        b = ball((16, 16, 16), (8, 7, 6), 2.5)
        a2 = np.roll(np.roll(a, 2, 0), 1, 1)
        b2 = np.roll(np.roll(b, 2, 0), 1, 1)
        assert hausdorff95(a, b) == pytest.approx(hausdorff95(a2, b2), abs=1e-12)

    def test_le_exact_hausdorff(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = (rng.random((6, 6, 6)) > 0.7).astype(np.uint8)
            b = (rng.random((6, 6, 6)) > 0.7).astype(np.uint8)
            if not a.any() or not b.any():
                continue
            sa = surface_voxels(a)
            sb = surface_voxels(b)
            pa = np.argwhere(sa).astype(float)
            pb = np.argwhere(sb).astype(float)
            d = np.sqrt(((pa[:, None] - pb[None]) ** 2).sum(-1))
            exact_hd = max(d.min(1).max(), d.min(0).max())
            assert hausdorff95(a, b) <= exact_hd + 1e-12

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_bruteforce_oracle(self, seed):
        rng = np.random.default_rng(seed)
        shape = tuple(rng.integers(4, 17, 3))
        a = (rng.random(shape) > rng.uniform(0.4, 0.9)).astype(np.uint8)
        b = (rng.random(shape) > rng.uniform(0.4, 0.9)).astype(np.uint8)
        assert hausdorff95(a, b) == pytest.approx(hd95_bruteforce(a, b), abs=1e-9)

    def test_anisotropic_spacing(self):
        a = np.zeros((6, 6, 6), np.uint8)
        b = np.zeros((6, 6, 6), np.uint8)
        a[1, 1, 1] = 1
        b[2, 1, 1] = 1
        assert hausdorff95(a, b, spacing=(2.0, 1.0, 1.0)) == pytest.approx(2.0)
        assert hd95_bruteforce(a, b, spacing=(2.0, 1.0, 1.0)) == pytest.approx(2.0)


class TestSurface:
    def test_solid_cube_surface(self):
        m = np.zeros((5, 5, 5), np.uint8)
        m[1:4, 1:4, 1:4] = 1
        s = surface_voxels(m)
        assert s.sum() == 27 - 1  # all but the single interior voxel
        assert not s[2, 2, 2]

    def test_boundary_voxels_are_surface(self):
        m = np.ones((3, 3, 3), np.uint8)
        s = surface_voxels(m)
        assert s.sum() == 26  # everything except the centre


class TestEvaluate:
    def _regions(self, seed, shape=(8, 8, 8)):
        rng = np.random.default_rng(seed)
        wt = ball(shape, (4, 4, 4), rng.uniform(2.5, 3.5))
        tc = ball(shape, (4, 4, 4), rng.uniform(1.5, 2.2))
        et = ball(shape, (4, 4, 4), rng.uniform(0.8, 1.2))
        return np.stack([wt, tc, et])

    def test_perfect_predictions(self):
        truths = {f"c{i}": self._regions(i) for i in range(3)}
        results, summary = evaluate(dict(truths), truths)
        for r in results:
            assert r.dice_et == r.dice_tc == r.dice_wt == 1.0
            assert r.hd95_et == r.hd95_tc == r.hd95_wt == 0.0
        assert summary["dice_wt"] == (1.0, 0.0)

    def test_missing_case_named(self):
        truths = {"a": self._regions(0), "b": self._regions(1)}
        preds = {"a": self._regions(0)}
        with pytest.raises(errors.MissingCase, match="b"):
            evaluate(preds, truths)

    def test_toy_set_matches_oracle(self):
        truths = {f"c{i}": self._regions(i) for i in range(3)}
        preds = {f"c{i}": self._regions(i + 10) for i in range(3)}
        results, _ = evaluate(preds, truths)
        for r in results:
            p = preds[r.case_id]
            t = truths[r.case_id]
            assert r.dice_wt == pytest.approx(dice_score(p[0], t[0]), abs=1e-12)
            assert r.hd95_et == pytest.approx(hd95_bruteforce(p[2], t[2]), abs=1e-9)

    def test_csv_roundtrip(self, tmp_path):
        truths = {f"c{i}": self._regions(i) for i in range(2)}
        preds = {f"c{i}": self._regions(i + 5) for i in range(2)}
        results, summary = evaluate(preds, truths)
        rp = tmp_path / "results.csv"
        sp = tmp_path / "summary.csv"
        write_results_csv(results, rp)
        write_summary_csv(summary, sp)
        back = read_results_csv(rp)
        assert [r.case_id for r in back] == [r.case_id for r in results]
        assert back[0].dice_wt == pytest.approx(results[0].dice_wt)
        lines = sp.read_text().strip().splitlines()
        assert lines[0] == "class,dice_mean,dice_std,hd95_mean,hd95_std"
        assert len(lines) == 4

    def test_case_shape_guard(self):
        with pytest.raises(errors.ShapeMismatch):
            evaluate_case("x", np.zeros((2, 4, 4, 4)), np.zeros((2, 4, 4, 4)))
