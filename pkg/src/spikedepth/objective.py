"""Training objective, evaluation metrics, optimizer, and the loop.

The loss has three terms: an exponentially weighted L1 over every
refinement iteration's full-resolution disparity (later iterations
weigh more, eta^(T-t)), a firing-rate regularizer pulling each neuron's
mean rate over the rollout toward r0, and a membrane-voltage energy
term. Ground-truth pixels that are non-positive or non-finite are
treated as holes and excluded everywhere.

Optimization is adaptive moments with decoupled weight decay,
elementwise gradient clipping to [-clip, clip], and a one-cycle
schedule: linear warmup to the peak rate, cosine decay to zero.
Training is deterministic for a fixed config seed.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad


def loss_weights(iters, eta):
    """eta^(T-t) for t = 1..T — strictly increasing toward 1 when eta < 1."""
    return [eta ** (iters - t) for t in range(1, iters + 1)]


def valid_mask(gt):
    gt = np.asarray(gt)
    return np.isfinite(gt) & (gt > 0)


def stereo_loss(disparities, d_gt, eta):
    """Sum_t eta^(T-t) * mean_valid |d_gt - d_t| over full-res fields."""
    mask = valid_mask(d_gt)
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise ValueError("ground truth has no valid pixels")
    mask_t = ad.tensor(mask.astype(np.float64))
    gt_t = ad.tensor(np.where(mask, d_gt, 0.0))
    total = None
    for weight, d in zip(loss_weights(len(disparities), eta), disparities):
        if d.shape != gt_t.shape:
            raise ad.ShapeError(f"prediction {d.shape} vs gt {gt_t.shape}")
        err = ad.sum_all(ad.mul(ad.abs_(gt_t - d), mask_t))
        term = ad.mul(err, weight / n_valid)
        total = term if total is None else ad.add(total, term)
    return total


def firing_rates(spikes_per_iter):
    """Mean spike value per neuron over the rollout: r = (1/T) sum_t s_t."""
    total = None
    for s in spikes_per_iter:
        total = s if total is None else ad.add(total, s)
    return ad.mul(total, 1.0 / len(spikes_per_iter))


def rate_reg(rates, r0):
    """Sum over neurons of (r_i - r0)^2; accepts one tensor or many."""
    if isinstance(rates, (ad.Tensor, np.ndarray)):
        rates = [rates]
    total = None
    for r in rates:
        r = r if isinstance(r, ad.Tensor) else ad.tensor(r)
        diff = r - r0
        term = ad.sum_all(ad.mul(diff, diff))
        total = term if total is None else ad.add(total, term)
    return total


def voltage_reg(voltages):
    """Sum over neurons and steps of v_i(t)^2; accepts nested iterables."""
    if isinstance(voltages, (ad.Tensor, np.ndarray)):
        voltages = [voltages]
    total = None
    for v in voltages:
        if isinstance(v, (list, tuple)):
            term = voltage_reg(v)
        else:
            v = v if isinstance(v, ad.Tensor) else ad.tensor(v)
            term = ad.sum_all(ad.mul(v, v))
        total = term if total is None else ad.add(total, term)
    return total


def full_loss(record, d_gt, cfg):
    """Composite loss over a RolloutRecord; returns (scalar Tensor, parts)."""
    stereo = stereo_loss(record.disparities, d_gt, cfg.eta)
    rates = [firing_rates(record.spikes[s]) for s in sorted(record.spikes)]
    rate = rate_reg(rates, cfg.r0)
    volt = voltage_reg([record.voltages[s] for s in sorted(record.voltages)])
    total = ad.add(stereo, ad.add(ad.mul(rate, cfg.lambda_f),
                                  ad.mul(volt, cfg.lambda_v)))
    parts = {"stereo": float(stereo.data), "rate": float(rate.data),
             "voltage": float(volt.data), "total": float(total.data)}
    return total, parts


def metrics(pred, gt):
    """bad-tau percentages (strict >) and mean absolute error over valid
    ground-truth pixels."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mask = valid_mask(gt)
    if not mask.any():
        raise ValueError("no valid pixels in ground truth")
    err = np.abs(pred - gt)[mask]
    return {
        "bad1": 100.0 * float((err > 1.0).mean()),
        "bad2": 100.0 * float((err > 2.0).mean()),
        "bad3": 100.0 * float((err > 3.0).mean()),
        "avg_err": float(err.mean()),
    }


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update


def clip_gradients(params, bound):
    """Elementwise clip of every gradient into [-bound, bound]."""
    for p in params.values():
        if p.grad is not None:
            np.clip(p.grad, -bound, bound, out=p.grad)


class OneCycle:
    """Linear warmup to the peak rate, then cosine decay to zero."""

    def __init__(self, peak_lr, total_steps, warmup_frac=0.05):
        self.peak = peak_lr
        self.total = max(1, total_steps)
        self.warmup = max(1, int(round(self.total * warmup_frac)))

    def lr(self, step):
        if step < self.warmup:
            return self.peak * (step + 1) / self.warmup
        span = max(1, self.total - self.warmup)
        progress = min(1.0, (step - self.warmup) / span)
        return self.peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class TrainingDiverged(RuntimeError):
    def __init__(self, message, diagnostics):
        super().__init__(message + "\n" + format_diagnostics(diagnostics))
        self.diagnostics = diagnostics


def format_diagnostics(diag):
    return "\n".join(f"  {k}: {v}" for k, v in diag.items())


def _flip_w(a):
    return np.ascontiguousarray(a[..., ::-1])


def _flip_h(a):
    return np.ascontiguousarray(a[..., ::-1, :])


def augment_sample(left, right, gt, rng):
    """Random horizontal flip (which must also swap the two views to stay
    a valid rectified pair) and vertical flip."""
    if rng.uniform() < 0.5:
        left, right = _flip_w(right), _flip_w(left)
        gt = _flip_w(gt)
    if rng.uniform() < 0.5:
        left, right, gt = _flip_h(left), _flip_h(right), _flip_h(gt)
    return left, right, gt


def train(dataset, cfg, pipeline=None, on_step=None):
    """Fit on (left, right, gt) samples; returns (pipeline, history rows).

    Deterministic for a fixed cfg.seed: parameter init and the sample/
    augmentation draws come from independent child seeds of it.
    """
    from .refinement import Pipeline  # deferred: avoid cycle at import time

    if not dataset:
        raise ValueError("dataset is empty")
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    if pipeline is None:
        pipeline = Pipeline(cfg, np.random.default_rng(seeds[0]))
    data_rng = np.random.default_rng(seeds[1])
    schedule = OneCycle(cfg.lr, cfg.steps, cfg.warmup_frac)
    optimizer = AdamW(pipeline.bag.named(), cfg.lr,
                      weight_decay=cfg.weight_decay)
    history = []
    batch = max(1, int(cfg.batch_size))
    for step in range(cfg.steps):
        pipeline.bag.zero_grad()
        indices = []
        sums: dict = {}
        # Gradients from each sample in the batch accumulate into .grad;
        # dividing afterwards gives the gradient of the mean loss.
        for _ in range(batch):
            idx = int(data_rng.integers(len(dataset)))
            indices.append(idx)
            left, right, gt = dataset[idx]
            if cfg.augment:
                left, right, gt = augment_sample(left, right, gt, data_rng)
            try:
                record = pipeline.forward(left, right)
                loss, parts = full_loss(record, gt, cfg)
                ad.backward(loss)
            except ad.NumericError as exc:
                raise TrainingDiverged(
                    f"non-finite value at step {step}: {exc}",
                    dump_state(pipeline, step, history)) from exc
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"loss diverged at step {step}",
                                       dump_state(pipeline, step, history))
            for key, value in parts.items():
                sums[key] = sums.get(key, 0.0) + value
        if batch > 1:
            for param in pipeline.bag.named().values():
                if param.grad is not None:
                    param.grad /= batch
        clip_gradients(pipeline.bag.named(), cfg.clip)
        lr = schedule.lr(step)
        optimizer.step(lr=lr)
        row = {"step": step, "lr": lr,
               "sample": ";".join(str(i) for i in indices),
               **{key: value / batch for key, value in sums.items()}}
        history.append(row)
        if on_step is not None:
            on_step(row)
    return pipeline, history


def dump_state(pipeline, step, history):
    """Compact numeric health snapshot for divergence reports."""
    diag = {"step": step}
    if history:
        diag["last_loss"] = history[-1]["total"]
    worst_p, worst_g = 0.0, 0.0
    for name, p in pipeline.bag.named().items():
        mag = float(np.abs(p.data).max())
        if mag > worst_p:
            worst_p, diag["max_param"] = mag, f"{name} ({mag:.3e})"
        if p.grad is not None:
            gmag = float(np.abs(p.grad).max())
            if gmag > worst_g:
                worst_g, diag["max_grad"] = gmag, f"{name} ({gmag:.3e})"
    return diag
