"""Parameter registry and the small layer vocabulary the nets are built
from: biased conv2d, group/instance norm, and the residual block.

Every trainable tensor lives in a ParamBag under a unique dotted name so
optimizers and checkpoints can address the full set without walking
object graphs.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad


class ParamBag:
    """Ordered name -> Tensor registry; the single owner of trainable state."""

    def __init__(self, rng=None):
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._params = {}

    def _register(self, name, data):
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        t = ad.tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def conv_weight(self, name, cout, cin, kh, kw, scale=None):
        fan_in = cin * kh * kw
        std = scale if scale is not None else math.sqrt(2.0 / fan_in)
        return self._register(name, self.rng.normal(0.0, std, size=(cout, cin, kh, kw)))

    def zeros(self, name, *shape):
        return self._register(name, np.zeros(shape))

    def ones(self, name, *shape):
        return self._register(name, np.ones(shape))

    def named(self):
        return dict(self._params)

    def __getitem__(self, name):
        return self._params[name]

    def __len__(self):
        return len(self._params)

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def count_values(self):
        return sum(t.size for t in self._params.values())


class Conv:
    """3-tensor conv: weight [O,C,kh,kw] plus optional bias broadcast as
    [O,1,1]. Padding defaults to 'same' for odd kernels."""

    def __init__(self, bag, name, cin, cout, k, stride=1, padding=None,
                 bias=True, scale=None):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.w = bag.conv_weight(f"{name}.w", cout, cin, k, k, scale=scale)
        self.b = bag.zeros(f"{name}.b", cout, 1, 1) if bias else None

    def __call__(self, x):
        y = ad.conv2d(x, self.w, stride=self.stride, padding=self.padding)
        if self.b is not None:
            y = ad.add(y, self.b)
        return y


class Norm:
    """Group norm with affine parameters; groups == channels gives
    instance norm."""

    def __init__(self, bag, name, channels, groups=None):
        self.groups = channels if groups is None else groups
        self.gamma = bag.ones(f"{name}.g", channels)
        self.beta = bag.zeros(f"{name}.b", channels)

    def __call__(self, x):
        return ad.group_norm(x, self.gamma, self.beta, self.groups)


class ResBlock:
    """conv-norm-relu-conv-norm + skip, relu after the add."""

    def __init__(self, bag, name, channels):
        self.conv1 = Conv(bag, f"{name}.conv1", channels, channels, 3)
        self.norm1 = Norm(bag, f"{name}.norm1", channels)
        self.conv2 = Conv(bag, f"{name}.conv2", channels, channels, 3)
        self.norm2 = Norm(bag, f"{name}.norm2", channels)

    def __call__(self, x):
        y = ad.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return ad.relu(ad.add(x, y))
