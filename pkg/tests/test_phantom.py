import csv

import numpy as np

from rrseg.phantom import PhantomConfig, generate_case, generate_dataset
from rrseg.volume import labels_to_regions, normalize_nonzero, read_rvol


class TestGenerateCase:
    def test_deterministic_per_case_seed(self):
        cfg = PhantomConfig()
        v1, m1 = generate_case(cfg, 3)
        v2, m2 = generate_case(cfg, 3)
        assert v1 == v2 and m1 == m2
        v3, _ = generate_case(cfg, 4)
        assert v1 != v3

    def test_labels_are_brats_vocabulary_and_nested(self):
        cfg = PhantomConfig()
        for i in range(5):
            _, mask = generate_case(cfg, i)
            assert set(np.unique(mask.data)) <= {0, 1, 2, 4}
            regions = labels_to_regions(mask)
            assert regions.check_nesting()
            wt, tc, et = (regions.data[k].astype(bool) for k in range(3))
            assert et.sum() > 0 and tc.sum() > et.sum() and wt.sum() > tc.sum()

    def test_nesting_has_margin(self):
        # every TC voxel must have its 6-neighbourhood inside WT, and ET inside TC
        cfg = PhantomConfig()
        for i in range(3):
            _, mask = generate_case(cfg, i)
            regions = labels_to_regions(mask).data.astype(bool)
            for inner, outer in ((2, 1), (1, 0)):
                inn, out = regions[inner], regions[outer]
                for ax in range(3):
                    for shift in (1, -1):
                        assert np.all(out[tuple(
                            slice(max(0, -shift), min(s, s - shift))
                            if a == ax else slice(None)
                            for a, s in enumerate(inn.shape)
                        )] >= inn[tuple(
                            slice(max(0, shift), min(s, s + shift))
                            if a == ax else slice(None)
                            for a, s in enumerate(inn.shape)
                        )])

    def test_zero_noise_region_means_match_profiles(self):
        cfg = PhantomConfig(noise_std=0.0, texture_scale=0.0)
        vol, mask = generate_case(cfg, 0)
        regions = labels_to_regions(mask).data.astype(bool)
        wt, tc, et = regions
        brain = vol.data[0] != 0
        edema = wt & ~tc
        core = tc & ~et
        tissue = brain & ~wt
        for c in range(4):
            ch = vol.data[c]
            assert abs(ch[tissue].mean() - cfg.base[c]) < 1e-6
            assert abs(ch[edema].mean() - (cfg.base[c] + cfg.wt_gain[c])) < 1e-6
            assert abs(ch[core].mean() - (cfg.base[c] + cfg.wt_gain[c] + cfg.tc_gain[c])) < 1e-6
            assert abs(ch[et].mean() - (
                cfg.base[c] + cfg.wt_gain[c] + cfg.tc_gain[c] + cfg.et_gain[c]
            )) < 1e-6

    def test_background_is_exactly_zero_and_normalizable(self):
        cfg = PhantomConfig()
        vol, _ = generate_case(cfg, 1)
        assert np.all(vol.data[:, 0, 0, 0] == 0.0)
        normalize_nonzero(vol)  # must not raise

    def test_oracle_mode_channel3_threshold_recovers_wt(self):
        cfg = PhantomConfig.oracle_learnable(count=3, seed=5)
        for i in range(3):
            vol, mask = generate_case(cfg, i)
            wt = labels_to_regions(mask).data[0].astype(bool)
            recovered = vol.data[3] > 0.5
            np.testing.assert_array_equal(recovered, wt)

    def test_tumor_fraction_within_geometric_bounds(self):
        cfg = PhantomConfig()
        total = np.prod(cfg.dims)
        lo = 0.5 * (4 / 3) * np.pi * cfg.wt_radius_range[0] ** 3 / total
        hi = 2.0 * (4 / 3) * np.pi * cfg.wt_radius_range[1] ** 3 / total
        for i in range(10):
            _, mask = generate_case(cfg, i)
            frac = (mask.data > 0).mean()
            assert lo <= frac <= hi


class TestGenerateDataset:
    def test_counts_and_manifest(self, tmp_path):
        cfg = PhantomConfig(count=4, seed=9)
        manifest = generate_dataset(cfg, tmp_path / "ds")
        with open(manifest) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4
        for row in rows:
            img = read_rvol(manifest.parent / row["image_path"])
            msk = read_rvol(manifest.parent / row["label_path"])
            assert img.channels == 4
            assert img.dims == msk.dims == cfg.dims

    def test_regeneration_is_bit_identical(self, tmp_path):
        cfg = PhantomConfig(count=3, seed=21)
        m1 = generate_dataset(cfg, tmp_path / "a")
        m2 = generate_dataset(cfg, tmp_path / "b")
        assert m1.read_text() == m2.read_text()
        for row in csv.DictReader(m1.open()):
            a = (m1.parent / row["image_path"]).read_bytes()
            b = (m2.parent / row["image_path"]).read_bytes()
            assert a == b
