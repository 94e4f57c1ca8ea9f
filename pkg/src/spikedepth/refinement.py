"""Iterative disparity refinement and the end-to-end stereo pipeline.

One refinement iteration at 1/4 resolution: sample the correlation
pyramid around the current disparity, encode the samples together with
the disparity into motion features, advance the recurrent spiking stack
one step, predict a disparity residual and an upsampling mask from the
finest layer's membrane potential, accumulate (clamped non-negative),
and convex-upsample to full resolution. All iterations' full-resolution
fields are returned — the loss weighs every one of them.

Depth follows the rectified-rig relation Z = B*f / (d + principal
offset); pixels whose denominator is not safely positive are reported
invalid rather than infinite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import correlation, features
from .features import SCALES
from .layers import Conv
from .rsnn import RsnnStack


@dataclass(frozen=True)
class RigCalibration:
    baseline: float        # meters
    focal: float           # pixels
    principal_offset: float = 0.0  # c_x1 - c_x0, pixels

    def __post_init__(self):
        if self.baseline <= 0 or self.focal <= 0:
            raise ValueError("baseline and focal must be positive")


def disparity_to_depth(disp, rig, eps=1e-6):
    """Z = B*f/(d + offset). Returns (depth, valid); invalid pixels are 0."""
    d = disp.data if isinstance(disp, ad.Tensor) else np.asarray(disp)
    denom = d + rig.principal_offset
    valid = denom > eps
    depth = np.zeros_like(denom)
    depth[valid] = rig.baseline * rig.focal / denom[valid]
    return depth, valid


def depth_to_disparity(depth, rig):
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("depth must be positive everywhere")
    return rig.baseline * rig.focal / depth - rig.principal_offset


class MotionEncoder:
    """Two convs over concat(cost samples, current disparity)."""

    def __init__(self, bag, in_ch, out_ch, name="menc"):
        self.conv1 = Conv(bag, f"{name}.conv1", in_ch, out_ch, 3)
        self.conv2 = Conv(bag, f"{name}.conv2", out_ch, out_ch, 3)

    def __call__(self, looked, disp):
        h, w = disp.shape
        x = ad.concat([looked, ad.reshape(disp, (1, h, w))], axis=0)
        return ad.relu(self.conv2(ad.relu(self.conv1(x))))


class ResidualHead:
    """Two-conv delta head plus the 9x16 upsampling-mask head, both read
    from the finest layer's membrane potential."""

    def __init__(self, bag, hidden, head_ch, name="head"):
        self.delta1 = Conv(bag, f"{name}.delta1", hidden, head_ch, 3)
        # final convs start at zero: iteration 0 leaves the disparity
        # unchanged and upsamples with uniform weights, so early training
        # is not dominated by random-head noise
        self.delta2 = Conv(bag, f"{name}.delta2", head_ch, 1, 3, scale=0.0)
        self.mask1 = Conv(bag, f"{name}.mask1", hidden, head_ch, 3)
        self.mask2 = Conv(bag, f"{name}.mask2", head_ch, 144, 1, scale=0.0)

    def __call__(self, v4):
        h, w = v4.shape[1], v4.shape[2]
        delta = ad.reshape(self.delta2(ad.relu(self.delta1(v4))), (h, w))
        mask_logits = self.mask2(ad.relu(self.mask1(v4)))
        return delta, mask_logits


def convex_upsample(d_quarter, mask_logits):
    """Softmax the 9 neighbor logits per output pixel and take the convex
    combination of the scaled (x4) coarse 3x3 neighborhood."""
    h, w = d_quarter.shape
    weights = ad.softmax(ad.reshape(mask_logits, (9, 16, h, w)), axis=0)
    return ad.convex_combine(d_quarter, weights)


@dataclass
class RolloutRecord:
    """Everything the loss and the diagnostics need from one forward pass."""

    disparities: list          # T full-res Tensors [H,W]
    quarter: list              # T quarter-res Tensors (post-clamp)
    deltas: list               # T residual Tensors
    spikes: dict               # scale -> list of T spike Tensors
    voltages: dict             # scale -> list of T membrane Tensors
    final_states: dict         # scale -> AlifState


class Pipeline:
    """Spike streams in, per-iteration disparity fields out."""

    def __init__(self, cfg, rng=None):
        from .layers import ParamBag  # local to keep module import light
        self.cfg = cfg
        self.bag = ParamBag(rng if rng is not None else np.random.default_rng(cfg.seed))
        channels = (cfg.c4, cfg.c8, cfg.c16)
        self.fnet = features.FeatureNet(self.bag, cfg.bins, channels)
        self.cnet = features.ContextNet(self.bag, cfg.bins, channels, cfg.hidden)
        self.rsnn = RsnnStack(self.bag, cfg.hidden, cfg.motion_channels,
                              norm_groups=cfg.norm_groups, v_peak=cfg.v_peak,
                              slope=cfg.surrogate_slope, gain=cfg.surrogate_gain,
                              use_gn=cfg.use_gn)
        lookup_ch = (2 * cfg.radius + 1) * correlation.LEVELS
        self.menc = MotionEncoder(self.bag, lookup_ch + 1, cfg.motion_channels)
        self.head = ResidualHead(self.bag, cfg.hidden, cfg.head_channels)

    def forward(self, spikes_l, spikes_r, iters=None):
        cfg = self.cfg
        iters = cfg.iters if iters is None else iters
        if iters < 1:
            raise ValueError(f"need at least one iteration, got {iters}")
        if spikes_l.shape != spikes_r.shape:
            raise ad.ShapeError(f"left/right stream shapes differ: "
                                f"{spikes_l.shape} vs {spikes_r.shape}")
        xl, (h0, w0) = features.pad_to_multiple(features.bin_stream(spikes_l, cfg.bins))
        xr, _ = features.pad_to_multiple(features.bin_stream(spikes_r, cfg.bins))

        fl = self.fnet(xl)
        fr = self.fnet(xr)
        ctx = self.cnet(xl)
        pyramid = correlation.build_pyramid(correlation.build_volume(fl.f4, fr.f4))

        states = self.rsnn.init_state(ctx)
        h4, w4 = fl.f4.shape[1], fl.f4.shape[2]
        d = ad.zeros((h4, w4))
        record = RolloutRecord([], [], [], {s: [] for s in SCALES},
                               {s: [] for s in SCALES}, {})
        for _ in range(iters):
            looked = correlation.lookup(pyramid, d, cfg.radius)
            motion = self.menc(looked, d)
            states = self.rsnn.update(states, ctx, motion)
            delta, mask_logits = self.head(states[4].v)
            d = ad.relu(ad.add(d, delta))
            full = ad.crop_hw(convex_upsample(d, mask_logits), h0, w0)
            record.quarter.append(d)
            record.deltas.append(delta)
            record.disparities.append(full)
            for s in SCALES:
                record.spikes[s].append(states[s].s)
                record.voltages[s].append(states[s].v)
        record.final_states = states
        return record

    def infer(self, spikes_l, spikes_r, iters=None):
        """Gradient-free forward; returns the final full-res field as array."""
        with ad.no_grad():
            rec = self.forward(spikes_l, spikes_r, iters=iters)
        return rec.disparities[-1].data
