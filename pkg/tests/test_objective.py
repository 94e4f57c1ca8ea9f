"""Loss terms, metrics, optimizer, schedule, augmentation, training loop."""

from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles as O
from spikedepth import autodiff as ad
from spikedepth import objective as obj
from spikedepth import refinement as rf
from spikedepth.config import RunConfig


class TestLossWeights:
    def test_two_iteration_weights(self):
        assert obj.loss_weights(2, 0.9) == pytest.approx([0.9, 1.0])
        assert sum(obj.loss_weights(2, 0.9)) == pytest.approx(1.9)

    def test_sixteen_iteration_closed_form(self):
        got = obj.loss_weights(16, 0.9)
        for t in range(1, 17):
            assert got[t - 1] == pytest.approx(0.9 ** (16 - t), abs=0, rel=0)
        assert got[-1] == 1.0
        assert all(a < b for a, b in zip(got, got[1:]))

    def test_eta_one_uniform(self):
        assert obj.loss_weights(5, 1.0) == [1.0] * 5


class TestStereoLoss:
    def test_single_iteration_constant_offset(self):
        gt = np.full((4, 4), 7.0)
        pred = [ad.tensor(np.full((4, 4), 5.0))]
        assert obj.stereo_loss(pred, gt, 0.9).data == pytest.approx(2.0)

    def test_two_iterations_weighted(self):
        gt = np.full((3, 3), 4.0)
        preds = [ad.tensor(np.full((3, 3), 3.0)),   # |err| = 1, weight 0.9
                 ad.tensor(np.full((3, 3), 6.0))]   # |err| = 2, weight 1.0
        want = 0.9 * 1.0 + 1.0 * 2.0
        assert obj.stereo_loss(preds, gt, 0.9).data == pytest.approx(want)

    def test_perfect_prediction_zero(self):
        gt = np.linspace(1.0, 9.0, 12).reshape(3, 4)
        preds = [ad.tensor(gt.copy()) for _ in range(3)]
        assert obj.stereo_loss(preds, gt, 0.9).data == pytest.approx(0.0)

    def test_holes_are_excluded(self):
        gt = np.array([[2.0, 0.0], [np.nan, 4.0]])
        pred = [ad.tensor(np.array([[3.0, 100.0], [100.0, 6.0]]))]
        # valid pixels: (0,0) err 1 and (1,1) err 2 -> mean 1.5
        assert obj.stereo_loss(pred, gt, 0.9).data == pytest.approx(1.5)

    def test_all_invalid_rejected(self):
        gt = np.zeros((2, 2))
        with pytest.raises(ValueError):
            obj.stereo_loss([ad.tensor(np.ones((2, 2)))], gt, 0.9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ad.ShapeError):
            obj.stereo_loss([ad.tensor(np.ones((2, 3)))], np.ones((3, 2)), 0.9)


class TestRegularizers:
    def test_firing_rates_mean_over_rollout(self):
        s = [ad.tensor(np.ones((2, 2))), ad.tensor(np.zeros((2, 2)))]
        np.testing.assert_allclose(obj.firing_rates(s).data, 0.5)

    def test_rate_reg_sums_over_neurons(self):
        rates = ad.tensor(np.array([0.1, 0.2, 0.6]))
        want = 0.0 + 0.1 ** 2 + 0.5 ** 2
        assert obj.rate_reg(rates, 0.1).data == pytest.approx(want)

    def test_rate_reg_multiple_groups_add(self):
        a = ad.tensor(np.array([0.3]))
        b = ad.tensor(np.array([0.9]))
        want = 0.2 ** 2 + 0.8 ** 2
        assert obj.rate_reg([a, b], 0.1).data == pytest.approx(want)

    def test_voltage_reg_sums_squares_over_steps(self):
        vs = [[ad.tensor(np.array([1.0, 2.0])), ad.tensor(np.array([3.0, 0.0]))]]
        assert obj.voltage_reg(vs).data == pytest.approx(1 + 4 + 9)

    def test_full_loss_composition(self):
        cfg = RunConfig(eta=0.9, lambda_f=0.5, lambda_v=0.25, r0=0.1)
        gt = np.full((2, 2), 3.0)
        rec = SimpleNamespace(
            disparities=[ad.tensor(np.full((2, 2), 2.0))],
            spikes={4: [ad.tensor(np.full((1, 2, 2), 1.0))]},
            voltages={4: [ad.tensor(np.full((1, 2, 2), 2.0))]})
        total, parts = obj.full_loss(rec, gt, cfg)
        rate = 4 * (1.0 - 0.1) ** 2
        volt = 4 * 4.0
        want = 1.0 + 0.5 * rate + 0.25 * volt
        assert parts["stereo"] == pytest.approx(1.0)
        assert parts["rate"] == pytest.approx(rate)
        assert parts["voltage"] == pytest.approx(volt)
        assert total.data == pytest.approx(want)
        assert parts["total"] == pytest.approx(want)


class TestMetrics:
    def test_worked_example(self):
        gt = np.full((1, 4), 10.0)
        pred = gt + np.array([[0.5, 1.5, 2.5, 3.5]])
        got = obj.metrics(pred, gt)
        assert got["bad1"] == pytest.approx(75.0)
        assert got["bad2"] == pytest.approx(50.0)
        assert got["bad3"] == pytest.approx(25.0)
        assert got["avg_err"] == pytest.approx(2.0)

    def test_threshold_is_strict(self):
        gt = np.full((1, 2), 5.0)
        pred = gt + np.array([[2.0, 2.0000001]])
        got = obj.metrics(pred, gt)
        assert got["bad2"] == pytest.approx(50.0)

    def test_invalid_pixels_ignored(self):
        gt = np.array([[4.0, 0.0, -1.0, np.nan, np.inf]])
        pred = np.full((1, 5), 6.5)
        got = obj.metrics(pred, gt)
        assert got["avg_err"] == pytest.approx(2.5)
        assert got["bad2"] == pytest.approx(100.0)

    def test_no_valid_pixels_rejected(self):
        with pytest.raises(ValueError, match="no valid pixels"):
            obj.metrics(np.ones((2, 2)), np.zeros((2, 2)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            obj.metrics(np.ones((2, 2)), np.ones((2, 3)))

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            gt = rng.uniform(-1, 20, size=(7, 9))
            gt[rng.random((7, 9)) < 0.1] = np.nan
            pred = gt + rng.normal(0, 2, size=(7, 9))
            if not ((gt > 0) & np.isfinite(gt)).any():
                continue
            got = obj.metrics(pred, gt)
            want = O.metrics_ref(pred, gt)
            for key in want:
                assert got[key] == pytest.approx(want[key], abs=1e-13)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_bad_rates_are_nested(self, seed):
        rng = np.random.default_rng(seed)
        gt = rng.uniform(0.5, 20, size=(5, 5))
        pred = gt + rng.normal(0, 3, size=(5, 5))
        got = obj.metrics(pred, gt)
        assert 100.0 >= got["bad1"] >= got["bad2"] >= got["bad3"] >= 0.0


class TestAdamW:
    def _param(self, value):
        t = ad.tensor(np.array([value]), requires_grad=True)
        return t

    def test_first_step_hand_computed(self):
        p = self._param(1.0)
        p.grad = np.array([0.5])
        optm = obj.AdamW({"p": p}, lr=0.1)
        optm.step()
        # m-hat = g, v-hat = g^2 -> unit-magnitude update g/|g|.
        assert p.data[0] == pytest.approx(1.0 - 0.1 * (0.5 / (0.5 + 1e-8)),
                                          rel=1e-12)

    def test_weight_decay_is_decoupled(self):
        p = self._param(2.0)
        p.grad = np.array([0.0])
        optm = obj.AdamW({"p": p}, lr=0.1, weight_decay=0.01)
        optm.step()
        # Zero gradient: the only movement is -lr * wd * p.
        assert p.data[0] == pytest.approx(2.0 * (1.0 - 0.1 * 0.01), rel=1e-12)

    def test_skips_parameters_without_gradient(self):
        p = self._param(3.0)
        p.grad = None
        obj.AdamW({"p": p}, lr=0.5, weight_decay=0.1).step()
        assert p.data[0] == 3.0

    def test_clip_gradients(self):
        p = self._param(0.0)
        p.grad = np.array([2.5])
        q = self._param(0.0)
        q.grad = np.array([-7.0])
        r = self._param(0.0)
        r.grad = None
        obj.clip_gradients({"p": p, "q": q, "r": r}, 1.0)
        assert p.grad[0] == 1.0 and q.grad[0] == -1.0 and r.grad is None


class TestOneCycle:
    def test_linear_warmup(self):
        sched = obj.OneCycle(1.0, 100, warmup_frac=0.1)
        assert sched.lr(0) == pytest.approx(0.1)
        assert sched.lr(4) == pytest.approx(0.5)
        assert sched.lr(9) == pytest.approx(1.0)

    def test_cosine_decay_to_zero(self):
        sched = obj.OneCycle(2.0, 100, warmup_frac=0.1)
        assert sched.lr(9) == pytest.approx(2.0)
        mid = sched.lr(9 + 45)
        assert 0.9 < mid < 1.1  # near half the peak mid-decay
        assert sched.lr(99) == pytest.approx(0.0, abs=1e-3)
        assert sched.lr(10 ** 6) == pytest.approx(0.0, abs=1e-12)

    def test_monotone_after_warmup(self):
        sched = obj.OneCycle(1.0, 50, warmup_frac=0.2)
        values = [sched.lr(s) for s in range(10, 50)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class _ScriptedRng:
    def __init__(self, draws):
        self.draws = list(draws)

    def uniform(self):
        return self.draws.pop(0)


class TestAugment:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.left = rng.random((3, 4, 6))
        self.right = rng.random((3, 4, 6))
        self.gt = rng.random((4, 6))

    def test_horizontal_flip_swaps_views(self):
        l2, r2, g2 = obj.augment_sample(self.left, self.right, self.gt,
                                        _ScriptedRng([0.0, 1.0]))
        np.testing.assert_array_equal(l2, self.right[..., ::-1])
        np.testing.assert_array_equal(r2, self.left[..., ::-1])
        np.testing.assert_array_equal(g2, self.gt[..., ::-1])

    def test_vertical_flip_keeps_views(self):
        l2, r2, g2 = obj.augment_sample(self.left, self.right, self.gt,
                                        _ScriptedRng([1.0, 0.0]))
        np.testing.assert_array_equal(l2, self.left[..., ::-1, :])
        np.testing.assert_array_equal(r2, self.right[..., ::-1, :])
        np.testing.assert_array_equal(g2, self.gt[..., ::-1, :])

    def test_identity_branch(self):
        l2, r2, g2 = obj.augment_sample(self.left, self.right, self.gt,
                                        _ScriptedRng([1.0, 1.0]))
        np.testing.assert_array_equal(l2, self.left)
        np.testing.assert_array_equal(g2, self.gt)

    def test_double_flip_is_involution_on_gt(self):
        _, _, g2 = obj.augment_sample(self.left, self.right, self.gt,
                                      _ScriptedRng([0.0, 0.0]))
        np.testing.assert_array_equal(g2[::-1, ::-1], self.gt)


def train_cfg(**kw):
    base = dict(bins=2, hidden=8, c4=8, c8=8, c16=8, motion_channels=8,
                head_channels=8, norm_groups=4, radius=3, iters=2,
                width=32, height=32, stream_steps=6, steps=2, lr=1e-3,
                seed=3, augment=False)
    base.update(kw)
    return RunConfig(**base)


def toy_dataset(cfg, n=1, seed=0):
    rng = np.random.default_rng(seed)
    data = []
    for _ in range(n):
        shape = (cfg.stream_steps, cfg.height, cfg.width)
        left = (rng.random(shape) < 0.2).astype(np.float64)
        right = (rng.random(shape) < 0.2).astype(np.float64)
        gt = rng.uniform(1.0, 8.0, size=(cfg.height, cfg.width))
        data.append((left, right, gt))
    return data


class TestTrain:
    def test_history_rows(self):
        cfg = train_cfg(steps=2)
        pipe, hist = obj.train(toy_dataset(cfg), cfg)
        assert len(hist) == 2
        for row in hist:
            assert {"step", "lr", "sample", "stereo", "rate",
                    "voltage", "total"} <= set(row)
        assert hist[0]["step"] == 0 and hist[1]["step"] == 1

    def test_deterministic_for_fixed_seed(self):
        cfg = train_cfg(steps=2)
        p1, h1 = obj.train(toy_dataset(cfg), cfg)
        p2, h2 = obj.train(toy_dataset(cfg), cfg)
        assert [r["total"] for r in h1] == [r["total"] for r in h2]
        for name, param in p1.bag.named().items():
            np.testing.assert_array_equal(param.data, p2.bag[name].data)

    def test_batch_of_identical_samples_matches_single(self):
        # One-sample dataset: every draw hits the same sample, so the
        # averaged batch gradient equals the single-sample gradient.
        cfg1 = train_cfg(steps=1, batch_size=1)
        cfg2 = train_cfg(steps=1, batch_size=2)
        data = toy_dataset(cfg1)
        p1, h1 = obj.train(data, cfg1)
        p2, h2 = obj.train(data, cfg2)
        assert h1[0]["total"] == pytest.approx(h2[0]["total"], rel=1e-12)
        for name, param in p1.bag.named().items():
            np.testing.assert_allclose(param.data, p2.bag[name].data,
                                       rtol=0, atol=1e-12)

    def test_training_moves_parameters(self):
        cfg = train_cfg(steps=2)
        pipe, _ = obj.train(toy_dataset(cfg), cfg)
        fresh = rf.Pipeline(cfg)
        moved = any(
            not np.array_equal(param.data, fresh.bag[name].data)
            for name, param in pipe.bag.named().items())
        assert moved

    def test_divergence_raises_with_diagnostics(self):
        cfg = train_cfg(steps=1)
        pipe = rf.Pipeline(cfg)
        bad = pipe.bag["fnet.stem.w"]
        bad.data[0, 0, 0, 0] = np.nan
        with pytest.raises(obj.TrainingDiverged) as err:
            obj.train(toy_dataset(cfg), cfg, pipeline=pipe)
        assert err.value.diagnostics["step"] == 0

    def test_on_step_callback_sees_every_row(self):
        cfg = train_cfg(steps=3)
        seen = []
        obj.train(toy_dataset(cfg), cfg, on_step=seen.append)
        assert [r["step"] for r in seen] == [0, 1, 2]

    def test_single_sample_loss_decreases_for_most_seeds(self):
        # Overfitting one sample for 50 steps should end lower than it
        # started for at least 9 of 10 seeds.
        wins = 0
        for seed in range(10):
            cfg = train_cfg(steps=50, seed=seed, batch_size=1, lr=1e-3)
            data = toy_dataset(cfg, n=1, seed=seed)
            _, hist = obj.train(data, cfg)
            if hist[-1]["total"] < hist[0]["total"]:
                wins += 1
        assert wins >= 9
