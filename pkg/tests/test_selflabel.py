"""Attention template matching and self-label extraction, checked against
explicit-loop references."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rvl import radio, selflabel
from rvl.autodiff import Tensor

RCFG = radio.RadioConfig()


def unit_bins(feat, eps=1e-12):
    """Per-bin channel vectors scaled to unit length, matching the training
    normalizer x / sqrt(sum x^2 + eps)."""
    norm = np.sqrt((feat ** 2).sum(axis=0, keepdims=True) + eps)
    return feat / norm


def naive_attention(f_r, template):
    """Sliding mean-cosine correlation with explicit loops and the same
    top-light/left-light zero padding."""
    c, h, w = f_r.shape
    _, th, tw = template.shape
    fr_n = unit_bins(f_r)
    t_n = unit_bins(template)
    top, left = (th - 1) // 2, (tw - 1) // 2
    padded = np.zeros((c, h + th - 1, w + tw - 1))
    padded[:, top:top + h, left:left + w] = fr_n
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            win = padded[:, i:i + th, j:j + tw]
            out[i, j] = (win * t_n).sum() / (th * tw)
    return out


class TestFeatureMaskRect:
    def test_single_pixel_maps_to_one_bin_plus_pad(self):
        mask = np.zeros((64, 48))
        mask[18, 30] = 1.0   # feature bin (4, 7) at 4x downsampling
        assert selflabel.feature_mask_rect(mask, (16, 12), pad_feat=0) == (4, 4, 7, 7)
        assert selflabel.feature_mask_rect(mask, (16, 12), pad_feat=1) == (3, 5, 6, 8)

    def test_pad_clipped_at_edges(self):
        mask = np.zeros((64, 48))
        mask[0, 0] = 1.0
        assert selflabel.feature_mask_rect(mask, (16, 12), pad_feat=2) == (0, 2, 0, 2)

    def test_matches_bruteforce_cover(self):
        rs = np.random.RandomState(3)
        for _ in range(10):
            mask = np.zeros((64, 48))
            r, c = rs.randint(5, 59), rs.randint(5, 43)
            mask[r - 4:r + 5, c - 3:c + 4] = 1.0
            got = selflabel.feature_mask_rect(mask, (16, 12), pad_feat=0)
            covered = [(i, j) for i in range(16) for j in range(12)
                       if mask[4 * i:4 * i + 4, 4 * j:4 * j + 4].any()]
            rows = [i for i, _ in covered]
            cols = [j for _, j in covered]
            assert got == (min(rows), max(rows), min(cols), max(cols))

    def test_indivisible_dims_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            selflabel.feature_mask_rect(np.ones((63, 48)), (16, 12))

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError, match="no feature bin"):
            selflabel.feature_mask_rect(np.zeros((64, 48)), (16, 12))


class TestCropTemplate:
    def test_crop_matches_rect(self):
        feat = Tensor(np.random.RandomState(0).standard_normal((5, 16, 12)))
        mask = np.zeros((64, 48))
        mask[20:28, 16:24] = 1.0
        r0, r1, c0, c1 = selflabel.feature_mask_rect(mask, (16, 12), 1)
        t = selflabel.crop_template(feat, mask, 1)
        assert np.array_equal(t.data, feat.data[:, r0:r1 + 1, c0:c1 + 1])


class TestAttentionMap:
    @pytest.mark.parametrize("th,tw", [(1, 1), (1, 3), (2, 2), (3, 3),
                                       (2, 5), (4, 4), (5, 2), (8, 8)])
    def test_matches_loop_reference(self, th, tw):
        rs = np.random.RandomState(th * 10 + tw)
        f_r = rs.standard_normal((6, 8, 8))
        tmpl = rs.standard_normal((6, th, tw))
        got = selflabel.attention_map(Tensor(f_r), Tensor(tmpl)).data
        assert got.shape == (8, 8)
        np.testing.assert_allclose(got, naive_attention(f_r, tmpl), atol=1e-12)

    def test_one_hot_matched_filter_peaks_at_plant_site(self):
        f_r = np.zeros((4, 12, 10))
        tmpl = np.random.RandomState(1).standard_normal((4, 3, 3))
        f_r[:, 4:7, 6:9] = tmpl   # plant the template so its centre lands at (5, 7)
        amap = selflabel.attention_map(Tensor(f_r), Tensor(tmpl)).data
        assert np.unravel_index(np.argmax(amap), amap.shape) == (5, 7)
        assert abs(amap[5, 7] - 1.0) < 1e-9

    def test_scores_bounded(self):
        rs = np.random.RandomState(7)
        amap = selflabel.attention_map(Tensor(rs.standard_normal((8, 16, 12))),
                                       Tensor(rs.standard_normal((8, 3, 4)))).data
        assert np.all(np.abs(amap) <= 1.0 + 1e-12)

    def test_zero_template_gives_zero_map(self):
        amap = selflabel.attention_map(
            Tensor(np.random.RandomState(2).standard_normal((3, 6, 6))),
            Tensor(np.zeros((3, 2, 2)))).data
        assert np.abs(amap).max() < 1e-5

    def test_amplitude_invariance_of_correlation(self):
        # per-bin normalization removes bin magnitudes on both sides
        rs = np.random.RandomState(9)
        f_r = rs.standard_normal((5, 7, 7))
        tmpl = rs.standard_normal((5, 3, 3))
        a = selflabel.attention_map(Tensor(f_r), Tensor(tmpl)).data
        b = selflabel.attention_map(Tensor(f_r * 100.0), Tensor(tmpl * 0.01)).data
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_shape_validation(self):
        good = Tensor(np.ones((3, 6, 6)))
        with pytest.raises(ValueError, match="channel"):
            selflabel.attention_map(good, Tensor(np.ones((4, 2, 2))))
        with pytest.raises(ValueError, match="larger"):
            selflabel.attention_map(good, Tensor(np.ones((3, 7, 2))))
        with pytest.raises(ValueError):
            selflabel.attention_map(Tensor(np.ones((6, 6))), Tensor(np.ones((3, 2, 2))))

    def test_gradient_flows_to_both_inputs(self):
        f_r = Tensor(np.random.RandomState(4).standard_normal((3, 6, 6)),
                     requires_grad=True)
        tmpl = Tensor(np.random.RandomState(5).standard_normal((3, 2, 2)),
                      requires_grad=True)
        selflabel.attention_score(selflabel.attention_map(f_r, tmpl)).backward()
        assert f_r.grad is not None and np.any(f_r.grad != 0)
        assert tmpl.grad is not None and np.any(tmpl.grad != 0)

    def test_attention_score_is_map_max(self):
        rs = np.random.RandomState(11)
        amap = selflabel.attention_map(Tensor(rs.standard_normal((4, 8, 8))),
                                       Tensor(rs.standard_normal((4, 3, 3))))
        assert abs(selflabel.attention_score(amap).item() - amap.data.max()) < 1e-15


class TestRescaleBin:
    def test_hand_values_heatmap_grid(self):
        # 16x12 features over a 64x48 heatmap: bin f maps to 4f + 2
        assert selflabel.rescale_bin((0, 0), (16, 12), (64, 48)) == (2, 2)
        assert selflabel.rescale_bin((8, 6), (16, 12), (64, 48)) == (34, 26)
        assert selflabel.rescale_bin((15, 11), (16, 12), (64, 48)) == (62, 46)

    def test_hand_values_image_grid(self):
        assert selflabel.rescale_bin((8, 6), (16, 12), (480, 640)) == (255, 346)

    @given(st.integers(0, 15), st.integers(0, 11))
    @settings(max_examples=50, deadline=None)
    def test_always_inside_grid_and_affine(self, fr, fc):
        row, col = selflabel.rescale_bin((fr, fc), (16, 12), (64, 48))
        assert 0 <= row < 64 and 0 <= col < 48
        assert row == math.floor(fr * 4 + 2)
        assert col == math.floor(fc * 4 + 2)


class FakeModel:
    """Identity encoders at 4x pooling so attention sees raw pixel blocks."""

    def encode_radio(self, x):
        d = x.data[0, 0]
        h, w = d.shape
        return Tensor(d.reshape(h // 4, 4, w // 4, 4).mean(axis=(1, 3))[None, None])

    def encode_vision(self, x):
        d = x.data[0].mean(axis=0)
        h, w = d.shape
        return Tensor(d.reshape(h // 4, 4, w // 4, 4).mean(axis=(1, 3))[None, None])


class FakePair:
    """Matching 2x2-feature-bin blocks planted in both modalities at rows
    32..39, cols 24..31, so exact alignment is the unique correlation max."""

    def __init__(self):
        self.id = 42
        self.heatmap = np.zeros((64, 48))
        self.heatmap[32:40, 24:32] = 50.0
        self.image = np.zeros((3, 64, 48))
        self.image[:, 32:40, 24:32] = 1.0
        self.mask = np.zeros((64, 48))
        self.mask[32:40, 24:32] = 1.0


class TestSelfCoordinates:
    def test_identity_model_recovers_planted_bin(self):
        lab = selflabel.self_coordinates(FakeModel(), FakePair(), RCFG)
        # feature argmax (8, 6) rescales to 4f + 2
        assert lab.heatmap_bin_est == (34, 26)
        assert lab.source == "attention" and not lab.calibrated
        assert abs(lab.range_est - radio.row_range(RCFG, 34)) < 1e-12
        assert abs(lab.azimuth_est - radio.col_azimuth(RCFG, 26)) < 1e-12

    def test_flat_attention_rejected(self):
        pair = FakePair()
        pair.heatmap[:] = 0.0   # zero radio input gives a constant (zero) map
        with pytest.raises(ValueError, match="no attention peak"):
            selflabel.self_coordinates(FakeModel(), pair, RCFG)


class TestCalibration:
    def fake_labels(self, offsets, n=12):
        import dataclasses

        from rvl import scene as sc
        ref = []
        for i in range(n):
            rng, az = 4.0 + 0.2 * i, -20.0 + 3.0 * i
            gt = sc.GroundTruth(range_m=rng, azimuth_deg=az, bbox=(0, 0, 1, 1),
                                heatmap_bin=(0, 0))
            lab = selflabel.SelfLabel(
                id=i, range_est=rng - offsets[0], azimuth_est=az - offsets[1],
                heatmap_bin_est=(0, 0))
            ref.append((lab, gt))
        return ref

    def test_recovers_constant_bias_exactly(self):
        cal = selflabel.calibrate(self.fake_labels((0.75, -4.5)))
        assert abs(cal.range_offset - 0.75) < 1e-12
        assert abs(cal.azimuth_offset - (-4.5)) < 1e-12
        assert cal.n_cal == 12

    def test_median_robust_to_outlier(self):
        ref = self.fake_labels((0.5, 1.0), n=13)
        lab0, gt0 = ref[0]
        ref[0] = (selflabel.SelfLabel(id=0, range_est=lab0.range_est - 100.0,
                                      azimuth_est=lab0.azimuth_est + 400.0,
                                      heatmap_bin_est=(0, 0)), gt0)
        cal = selflabel.calibrate(ref)
        assert abs(cal.range_offset - 0.5) < 1e-9
        assert abs(cal.azimuth_offset - 1.0) < 1e-9

    def test_too_few_references_rejected(self):
        with pytest.raises(ValueError, match=">= 10"):
            selflabel.calibrate(self.fake_labels((0.0, 0.0), n=9))

    def test_apply_shifts_and_recomputes_bin(self):
        lab = selflabel.SelfLabel(id=3, range_est=5.0, azimuth_est=0.0,
                                  heatmap_bin_est=(27, 24))
        cal = selflabel.Calibration(range_offset=0.75, azimuth_offset=-7.5, n_cal=10)
        out = selflabel.apply_calibration(lab, cal, RCFG)
        assert abs(out.range_est - 5.75) < 1e-12
        assert abs(out.azimuth_est - (-7.5)) < 1e-12
        assert out.heatmap_bin_est == (radio.range_to_row(RCFG, 5.75),
                                       radio.azimuth_to_col(RCFG, -7.5))
        assert out.calibrated
        assert not lab.calibrated   # original untouched

    def test_zero_offsets_fix_point(self):
        lab = selflabel.SelfLabel(id=0, range_est=6.0, azimuth_est=10.0,
                                  heatmap_bin_est=(32, 29))
        cal = selflabel.Calibration(0.0, 0.0, 10)
        out = selflabel.apply_calibration(lab, cal, RCFG)
        assert (out.range_est, out.azimuth_est) == (6.0, 10.0)
        assert out.heatmap_bin_est == (radio.range_to_row(RCFG, 6.0),
                                       radio.azimuth_to_col(RCFG, 10.0))


class TestLocDataset:
    class P:
        def __init__(self, pid):
            self.id = pid
            self.heatmap = np.full((4, 4), float(pid))

    def test_alignment_by_id(self):
        pairs = [self.P(3), self.P(1)]
        labels = [selflabel.SelfLabel(id=1, range_est=5.0, azimuth_est=2.0,
                                      heatmap_bin_est=(0, 0)),
                  selflabel.SelfLabel(id=3, range_est=7.0, azimuth_est=-3.0,
                                      heatmap_bin_est=(0, 0))]
        out = selflabel.build_loc_dataset(pairs, labels)
        assert [lab for _, lab in out] == [(7.0, -3.0), (5.0, 2.0)]
        assert out[0][0][0, 0] == 3.0

    def test_missing_label_rejected(self):
        with pytest.raises(ValueError, match="missing label"):
            selflabel.build_loc_dataset([self.P(9)], [])


class TestLabelsCsv:
    def test_round_trip(self, tmp_path):
        labels = [
            selflabel.SelfLabel(id=0, range_est=5.25, azimuth_est=-3.125,
                                heatmap_bin_est=(28, 22)),
            selflabel.SelfLabel(id=7, range_est=6.5, azimuth_est=12.0,
                                heatmap_bin_est=(34, 30),
                                source="fusion_teacher", calibrated=True),
        ]
        path = tmp_path / "labels.csv"
        selflabel.write_labels_csv(labels, path)
        assert selflabel.read_labels_csv(path) == labels

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            selflabel.read_labels_csv(tmp_path / "nope.csv")
