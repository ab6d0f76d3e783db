"""Regression net architecture, label normalization, training behaviour."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rvl import dataset, localiser, radio, scene
from rvl.autodiff import Tensor


RCFG = radio.RadioConfig()


def planar_error(pred, gt_range, gt_az):
    """Euclidean error on the ground plane in metres."""
    px = pred[0] * math.sin(math.radians(pred[1]))
    py = pred[0] * math.cos(math.radians(pred[1]))
    gx = gt_range * math.sin(math.radians(gt_az))
    gy = gt_range * math.cos(math.radians(gt_az))
    return math.hypot(px - gx, py - gy)


class TestArchitecture:
    def test_conv_stage_dims_at_desk_scale(self):
        # (h - k)//s + 1 applied by hand through the four stages
        assert localiser.conv_output_dims((64, 48)) == [
            (8, 31, 23), (16, 15, 11), (8, 7, 5), (32, 4, 2)]

    def test_too_small_input_rejected(self):
        with pytest.raises(ValueError, match="too small"):
            localiser.conv_output_dims((8, 8))

    def test_forward_output_dim(self):
        model = localiser.Localiser((64, 48), seed=0)
        out = model.forward(Tensor(np.zeros((3, 1, 64, 48))))
        assert out.shape == (3, 2)

    def test_wrong_input_dims_rejected(self):
        model = localiser.Localiser((64, 48), seed=0)
        with pytest.raises(ValueError, match="expected"):
            model.forward(Tensor(np.zeros((1, 1, 32, 32))))

    def test_linear_stack_sizes(self):
        model = localiser.Localiser((64, 48), seed=0)
        sizes = [w.shape for w in model.lin_w]
        assert sizes == [(256, 128), (128, 16), (16, 64), (64, 64), (64, 2)]


class TestLabelNormalization:
    def test_hand_values(self):
        labs = np.array([[3.0, -20.0], [12.0, 45.0], [0.0, -45.0]])
        units = localiser.normalize_labels(RCFG, labs)
        assert np.allclose(units, [[0.25, 25.0 / 90.0], [1.0, 1.0], [0.0, 0.0]])

    @given(st.floats(0.0, 12.0), st.floats(-45.0, 45.0))
    @settings(max_examples=50, deadline=None)
    def test_round_trip(self, rng, az):
        u = localiser.normalize_labels(RCFG, np.array([[rng, az]]))
        assert np.all((u >= 0.0) & (u <= 1.0))
        back = localiser.denormalize_labels(RCFG, u)
        assert np.allclose(back, [[rng, az]], atol=1e-9)


class TestTraining:
    def test_constant_labels_converge(self):
        rs = np.random.RandomState(2)
        records = [(rs.uniform(0, 1, (64, 48)), (6.0, 10.0)) for _ in range(16)]
        cfg = localiser.LocaliserConfig(steps=500, batch=8, lr=1e-3, seed=0)
        model, curve = localiser.train_localiser(records, RCFG, cfg)
        assert curve[-1] < 1e-3
        # prediction within 0.05 window units of the constant
        units = localiser.normalize_labels(RCFG, np.array([[6.0, 10.0]]))[0]
        rng, az = localiser.predict(model, RCFG, records[0][0])
        pred_units = localiser.normalize_labels(RCFG, np.array([[rng, az]]))[0]
        assert np.all(np.abs(pred_units - units) < 0.05)

    def test_same_seed_identical_curves(self):
        rs = np.random.RandomState(3)
        records = [(rs.uniform(0, 1, (64, 48)), (r, a))
                   for r, a in rs.uniform(0, 1, (12, 2)) * [12.0, 40.0]]
        cfg = localiser.LocaliserConfig(steps=5, batch=8, lr=1e-3, seed=4)
        _, a = localiser.train_localiser(records, RCFG, cfg)
        _, b = localiser.train_localiser(records, RCFG, cfg)
        assert np.array_equal(a, b)

    def test_curve_length(self):
        rs = np.random.RandomState(5)
        records = [(rs.uniform(0, 1, (64, 48)), (5.0, 0.0)) for _ in range(8)]
        cfg = localiser.LocaliserConfig(steps=7, batch=8, seed=0)
        _, curve = localiser.train_localiser(records, RCFG, cfg)
        assert curve.shape == (7,)

    def test_non_finite_loss_aborts(self):
        rs = np.random.RandomState(6)
        records = [(rs.uniform(0, 1, (64, 48)), (5.0, 0.0)) for _ in range(8)]
        records[0] = (np.full((64, 48), np.nan), (5.0, 0.0))
        cfg = localiser.LocaliserConfig(steps=2, batch=8, seed=0)
        with pytest.raises(RuntimeError, match="diverged"):
            localiser.train_localiser(records, RCFG, cfg)

    def test_too_few_records_rejected(self):
        cfg = localiser.LocaliserConfig(steps=1, batch=8, seed=0)
        with pytest.raises(ValueError, match="records"):
            localiser.train_localiser([(np.zeros((64, 48)), (1.0, 0.0))], RCFG, cfg)

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            localiser.LocaliserConfig(batch=1)
        with pytest.raises(ValueError):
            localiser.LocaliserConfig(lr=0.0)


class TestPredict:
    def test_always_inside_window(self):
        model = localiser.Localiser((64, 48), seed=7)
        rs = np.random.RandomState(7)
        for scale in (1.0, 100.0, 1e6):
            rng, az = localiser.predict(model, RCFG, rs.uniform(0, scale, (64, 48)))
            assert 0.0 <= rng <= 12.0
            assert -45.0 <= az <= 45.0

    def test_deterministic(self):
        model = localiser.Localiser((64, 48), seed=8)
        hm = np.random.RandomState(8).uniform(0, 1, (64, 48))
        assert localiser.predict(model, RCFG, hm) == localiser.predict(model, RCFG, hm)

    def test_batch_matches_single(self):
        model = localiser.Localiser((64, 48), seed=9)
        hms = np.random.RandomState(9).uniform(0, 1, (3, 64, 48))
        batch = localiser.predict_batch(model, RCFG, hms)
        for i in range(3):
            single = localiser.predict(model, RCFG, hms[i])
            assert np.allclose(batch[i], single, atol=1e-12)

    def test_dim_mismatch_rejected(self):
        model = localiser.Localiser((64, 48), seed=0)
        with pytest.raises(ValueError):
            localiser.predict(model, RCFG, np.zeros((32, 32)))


class TestPersistence:
    def test_checkpoint_round_trip(self, tmp_path):
        model = localiser.Localiser((64, 48), seed=10)
        hm = np.random.RandomState(10).uniform(0, 1, (64, 48))
        before = localiser.predict(model, RCFG, hm)
        localiser.save_localiser(model, tmp_path)
        loaded = localiser.load_localiser(tmp_path)
        after = localiser.predict(loaded, RCFG, hm)
        assert np.allclose(before, after, atol=1e-4)

    def test_prediction_csv_round_trip(self, tmp_path):
        rows = [(0, 3.25, -12.5), (7, 11.0, 44.9)]
        path = tmp_path / "preds.csv"
        localiser.write_predictions(rows, path)
        assert localiser.read_predictions(path) == rows


class TestLabelDensityTrend:
    def test_more_labels_do_not_hurt(self):
        """Validation error with 4x the labels stays within 20% of the
        fewer-label error (monotone-trend check, seeded)."""
        scfg, cam = scene.SceneConfig(), scene.CameraModel()
        train = dataset.synthesize_pairs(256, 100, scfg, cam, RCFG)
        val = dataset.synthesize_pairs(48, 5000, scfg, cam, RCFG)
        errs = {}
        for n in (64, 256):
            records = [(p.heatmap, (p.gt.range_m, p.gt.azimuth_deg))
                       for p in train[:n]]
            cfg = localiser.LocaliserConfig(steps=400, batch=8, lr=1e-3, seed=0)
            model, _ = localiser.train_localiser(records, RCFG, cfg)
            errs[n] = float(np.median([
                planar_error(localiser.predict(model, RCFG, p.heatmap),
                             p.gt.range_m, p.gt.azimuth_deg) for p in val]))
        assert errs[256] <= 1.2 * errs[64] + 0.05
