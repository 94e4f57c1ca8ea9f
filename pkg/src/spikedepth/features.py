"""Feature and context networks.

Both consume a spike stream whose N steps are first summed into a fixed
number of temporal bins (so parameter count is independent of stream
length), then downsampled by a 7x7 stride-2 stem and three stride-2
stages with residual blocks, yielding features at 1/4, 1/8, and 1/16 of
the padded input resolution.

The feature net is applied to both stream halves with one shared
parameter set. The context net (left stream only) additionally emits,
per scale, the gate embeddings c_alpha/c_beta/c_gamma, a context map
that is re-injected every refinement iteration, and the seed for the
initial recurrent membrane state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import Conv, Norm, ResBlock

SCALES = (4, 8, 16)


def bin_stream(spikes, bins):
    """Sum [N,H,W] spike steps into [bins,H,W] float channels. The first
    N % bins bins absorb one extra step each; N >= bins is required."""
    spikes = np.asarray(spikes)
    n = spikes.shape[0]
    if n < bins:
        raise ValueError(f"stream of {n} steps cannot fill {bins} temporal bins")
    base, extra = divmod(n, bins)
    sizes = [base + 1 if i < extra else base for i in range(bins)]
    edges = np.concatenate([[0], np.cumsum(sizes)])
    out = np.stack([spikes[a:b].sum(axis=0) for a, b in zip(edges[:-1], edges[1:])])
    return out.astype(np.float64)


def pad_to_multiple(x, multiple=16):
    """Zero-pad the trailing two axes up to the next multiple. Returns the
    padded array and the original (H, W)."""
    h, w = x.shape[-2], x.shape[-1]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        pads = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
        x = np.pad(x, pads)
    return x, (h, w)


class _Backbone:
    """Shared trunk: 7x7/2 stem then three conv/2 + 2 res-block stages."""

    def __init__(self, bag, name, in_ch, channels):
        c4, c8, c16 = channels
        self.stem = Conv(bag, f"{name}.stem", in_ch, c4, 7, stride=2)
        self.stem_norm = Norm(bag, f"{name}.stem_norm", c4)
        self.stages = []
        cin = c4
        for scale, cout in zip(SCALES, channels):
            down = Conv(bag, f"{name}.down{scale}", cin, cout, 3, stride=2)
            norm = Norm(bag, f"{name}.down{scale}_norm", cout)
            blocks = [ResBlock(bag, f"{name}.res{scale}{chr(97 + i)}", cout)
                      for i in range(2)]
            self.stages.append((down, norm, blocks))
            cin = cout

    def __call__(self, x):
        y = ad.relu(self.stem_norm(self.stem(x)))
        outs = []
        for down, norm, blocks in self.stages:
            y = ad.relu(norm(down(y)))
            for block in blocks:
                y = block(y)
            outs.append(y)
        return tuple(outs)  # (f4, f8, f16)


def _check_input(x, bins):
    if x.data.ndim != 3 or x.data.shape[0] != bins:
        raise ValueError(f"expected [{bins},H,W] binned input, got {x.data.shape}")
    h, w = x.data.shape[1], x.data.shape[2]
    if h % 16 or w % 16:
        raise ValueError(f"input dims {h}x{w} must be multiples of 16 "
                         f"(use pad_to_multiple)")
    if h < 32 or w < 32:
        raise ValueError(f"input {h}x{w} too small: need at least 32x32")


@dataclass(frozen=True)
class FeaturePyramid:
    f4: object
    f8: object
    f16: object

    def at(self, scale):
        return {4: self.f4, 8: self.f8, 16: self.f16}[scale]


class FeatureNet:
    def __init__(self, bag, in_ch, channels, name="fnet"):
        self.in_ch = in_ch
        self.backbone = _Backbone(bag, name, in_ch, channels)

    def __call__(self, binned):
        x = binned if isinstance(binned, ad.Tensor) else ad.tensor(binned)
        _check_input(x, self.in_ch)
        f4, f8, f16 = self.backbone(x)
        return FeaturePyramid(f4, f8, f16)


@dataclass(frozen=True)
class ContextSet:
    """Per-scale recurrent-update inputs, keyed by scale in {4, 8, 16}."""

    ctx: dict
    c_alpha: dict
    c_beta: dict
    c_gamma: dict
    seed: dict


class ContextNet:
    def __init__(self, bag, in_ch, channels, hidden, name="cnet"):
        self.in_ch = in_ch
        self.backbone = _Backbone(bag, name, in_ch, channels)
        self.heads = {}
        for scale, c in zip(SCALES, channels):
            self.heads[scale] = {
                "ctx": Conv(bag, f"{name}.ctx{scale}", c, hidden, 3),
                "alpha": Conv(bag, f"{name}.alpha{scale}", c, hidden, 1),
                "beta": Conv(bag, f"{name}.beta{scale}", c, hidden, 1),
                "gamma": Conv(bag, f"{name}.gamma{scale}", c, hidden, 1),
                "seed": Conv(bag, f"{name}.seed{scale}", c, hidden, 3),
            }

    def __call__(self, binned):
        x = binned if isinstance(binned, ad.Tensor) else ad.tensor(binned)
        _check_input(x, self.in_ch)
        feats = dict(zip(SCALES, self.backbone(x)))
        field = {k: {} for k in ("ctx", "alpha", "beta", "gamma", "seed")}
        for scale in SCALES:
            for key, head in self.heads[scale].items():
                field[key][scale] = head(feats[scale])
        return ContextSet(ctx=field["ctx"], c_alpha=field["alpha"],
                          c_beta=field["beta"], c_gamma=field["gamma"],
                          seed=field["seed"])
