"""Iterative refinement rollout: residual updates, upsampling, rig math."""

import numpy as np
import pytest

import oracles as O
from spikedepth import autodiff as ad
from spikedepth import refinement as rf
from spikedepth.config import RunConfig


def tiny_cfg(**kw):
    """Smallest config the backbone accepts (32x32, /16 divisible)."""
    base = dict(bins=2, hidden=8, c4=8, c8=8, c16=8, motion_channels=8,
                head_channels=8, norm_groups=4, radius=3, iters=2,
                width=32, height=32, stream_steps=6, seed=0)
    base.update(kw)
    return RunConfig(**base)


def tiny_streams(cfg, seed=0):
    rng = np.random.default_rng(seed)
    shape = (cfg.stream_steps, cfg.height, cfg.width)
    left = (rng.random(shape) < 0.15).astype(np.float64)
    right = (rng.random(shape) < 0.15).astype(np.float64)
    return left, right


class TestRig:
    def test_disparity_twenty_maps_to_four_meters(self):
        rig = rf.RigCalibration(baseline=0.08, focal=1000.0)
        depth, valid = rf.disparity_to_depth(np.array([[20.0]]), rig)
        assert valid.all()
        assert depth[0, 0] == pytest.approx(4.0)

    def test_roundtrip(self):
        rig = rf.RigCalibration(baseline=0.11, focal=720.0,
                                principal_offset=1.5)
        disp = np.linspace(2.0, 40.0, 16).reshape(4, 4)
        depth, valid = rf.disparity_to_depth(disp, rig)
        assert valid.all()
        back = rf.depth_to_disparity(depth, rig)
        np.testing.assert_allclose(back, disp, rtol=0, atol=1e-12)

    def test_nonpositive_denominator_flagged_invalid(self):
        rig = rf.RigCalibration(baseline=0.08, focal=1000.0)
        depth, valid = rf.disparity_to_depth(np.array([[0.0, 5.0]]), rig)
        assert not valid[0, 0] and valid[0, 1]
        assert depth[0, 0] == 0.0

    def test_bad_rig_rejected(self):
        with pytest.raises(ValueError):
            rf.RigCalibration(baseline=0.0, focal=1000.0)
        with pytest.raises(ValueError):
            rf.RigCalibration(baseline=0.08, focal=-1.0)

    def test_nonpositive_depth_rejected(self):
        rig = rf.RigCalibration(baseline=0.08, focal=1000.0)
        with pytest.raises(ValueError):
            rf.depth_to_disparity(np.array([[1.0, 0.0]]), rig)


class TestConvexUpsample:
    def _rand(self, h, w, seed):
        rng = np.random.default_rng(seed)
        d = rng.random((h, w)) * 10.0
        logits = rng.standard_normal((144, h, w))
        return d, logits

    def test_matches_reference(self):
        d, logits = self._rand(3, 5, 1)
        weights = ad.softmax(ad.reshape(ad.tensor(logits), (9, 16, 3, 5)),
                             axis=0)
        got = rf.convex_upsample(ad.tensor(d), ad.tensor(logits))
        want = O.convex_upsample_ref(d, weights.data)
        np.testing.assert_allclose(got.data, want, rtol=0, atol=1e-12)

    def test_output_inside_neighborhood_hull(self):
        h, w = 4, 6
        d, logits = self._rand(h, w, 2)
        up = rf.convex_upsample(ad.tensor(d), ad.tensor(logits)).data
        padded = np.pad(d, 1, mode="edge")
        for i in range(h):
            for j in range(w):
                block = 4.0 * padded[i:i + 3, j:j + 3]
                tile = up[4 * i:4 * i + 4, 4 * j:4 * j + 4]
                assert tile.min() >= block.min() - 1e-12
                assert tile.max() <= block.max() + 1e-12

    def test_constant_field_scales_by_four(self):
        d = np.full((3, 4), 2.5)
        logits = np.random.default_rng(3).standard_normal((144, 3, 4))
        up = rf.convex_upsample(ad.tensor(d), ad.tensor(logits)).data
        np.testing.assert_allclose(up, 10.0, rtol=0, atol=1e-12)

    def test_zero_logits_average_neighborhood(self):
        d, _ = self._rand(3, 4, 4)
        up = rf.convex_upsample(ad.tensor(d), ad.tensor(np.zeros((144, 3, 4))))
        padded = np.pad(d, 1, mode="edge")
        for i in range(3):
            for j in range(4):
                want = 4.0 * padded[i:i + 3, j:j + 3].mean()
                tile = up.data[4 * i:4 * i + 4, 4 * j:4 * j + 4]
                np.testing.assert_allclose(tile, want, rtol=0, atol=1e-12)


class TestPipeline:
    def test_fresh_head_first_iteration_is_identity(self):
        cfg = tiny_cfg()
        pipe = rf.Pipeline(cfg)
        left, right = tiny_streams(cfg)
        rec = pipe.forward(left, right, iters=1)
        assert np.all(rec.deltas[0].data == 0.0)
        assert np.all(rec.quarter[0].data == 0.0)
        assert np.all(rec.disparities[0].data == 0.0)

    def test_rollout_is_residual(self):
        cfg = tiny_cfg(iters=3)
        pipe = rf.Pipeline(cfg)
        # Perturb the head so the deltas are non-trivial.
        rng = np.random.default_rng(7)
        for name in ("head.delta2.w", "head.mask2.w"):
            p = pipe.bag[name]
            p.data[...] = 0.05 * rng.standard_normal(p.data.shape)
        left, right = tiny_streams(cfg)
        rec = pipe.forward(left, right)
        prev = np.zeros_like(rec.quarter[0].data)
        for t in range(3):
            want = np.maximum(prev + rec.deltas[t].data, 0.0)
            np.testing.assert_allclose(rec.quarter[t].data, want,
                                       rtol=0, atol=1e-12)
            prev = rec.quarter[t].data
        assert any(np.any(d.data != 0) for d in rec.deltas)

    def test_disparity_never_negative(self):
        cfg = tiny_cfg(iters=4)
        pipe = rf.Pipeline(cfg)
        rng = np.random.default_rng(11)
        for name in ("head.delta2.w", "head.mask2.w"):
            p = pipe.bag[name]
            p.data[...] = 0.1 * rng.standard_normal(p.data.shape)
        left, right = tiny_streams(cfg, seed=5)
        rec = pipe.forward(left, right)
        for q in rec.quarter:
            assert q.data.min() >= 0.0

    def test_record_shapes(self):
        cfg = tiny_cfg(iters=2)
        pipe = rf.Pipeline(cfg)
        left, right = tiny_streams(cfg)
        rec = pipe.forward(left, right)
        assert len(rec.disparities) == 2
        assert rec.disparities[0].data.shape == (cfg.height, cfg.width)
        assert rec.quarter[0].data.shape == (cfg.height // 4, cfg.width // 4)
        assert rec.spikes[4][0].data.shape == (cfg.hidden, cfg.height // 4,
                                               cfg.width // 4)
        assert rec.spikes[16][0].data.shape == (cfg.hidden, cfg.height // 16,
                                                cfg.width // 16)
        assert set(rec.final_states) == {4, 8, 16}

    def test_gradient_reaches_head_from_zero_start(self):
        # The rollout starts at exactly d = 0 with a fresh head, which sits
        # on the clamp boundary; the subgradient there must still pass or
        # the disparity path can never learn.
        from spikedepth import objective as obj
        cfg = tiny_cfg(iters=2)
        pipe = rf.Pipeline(cfg)
        left, right = tiny_streams(cfg)
        rec = pipe.forward(left, right)
        gt = np.random.default_rng(0).uniform(2.0, 10.0,
                                              (cfg.height, cfg.width))
        loss, _ = obj.full_loss(rec, gt, cfg)
        ad.backward(loss)
        grad = pipe.bag["head.delta2.w"].grad
        assert grad is not None and np.abs(grad).max() > 0.0

    def test_infer_matches_forward(self):
        cfg = tiny_cfg(iters=2)
        left, right = tiny_streams(cfg)
        rec = rf.Pipeline(cfg).forward(left, right)
        out = rf.Pipeline(cfg).infer(left, right)
        np.testing.assert_array_equal(out, rec.disparities[-1].data)

    def test_mismatched_streams_rejected(self):
        cfg = tiny_cfg()
        pipe = rf.Pipeline(cfg)
        left, right = tiny_streams(cfg)
        with pytest.raises(ad.ShapeError):
            pipe.forward(left, right[:, :16, :])

    def test_zero_iterations_rejected(self):
        cfg = tiny_cfg()
        pipe = rf.Pipeline(cfg)
        left, right = tiny_streams(cfg)
        with pytest.raises(ValueError):
            pipe.forward(left, right, iters=0)
