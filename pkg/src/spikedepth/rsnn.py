"""Three-layer recurrent spiking update operator.

Each layer holds adaptive leaky integrate-and-fire units on a spatial
grid. Per update, three convolutional gates are computed from the
layer's previous spikes and its exogenous input x (context features,
plus motion features on the finest layer), each shifted by a per-pixel
context embedding:

    alpha = sigmoid(GN(Conv([s_prev, x])) + c_alpha)   membrane retention
    beta  = sigmoid(GN(Conv([s_prev, x])) + c_beta)    threshold scale
    gamma = sigmoid(GN(Conv([s_prev, x])) + c_gamma)   soft-reset strength

and the neuron state advances by the exponential-Euler step

    h    = alpha * v_prev + (1 - alpha) * (W_rec s_prev + W_f s_below)
    v_th = beta * v_peak
    s    = step(h - v_th)          (step(0) = 1; surrogate gradient)
    v    = h - gamma * s * v_th

Layers run coarse to fine (1/16 -> 1/8 -> 1/4); the feedforward kernel
W_f of a finer layer consumes the bilinearly upsampled fresh spikes of
the layer above it, so information flows strictly coarse to fine within
one update.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .features import SCALES
from .layers import Conv, Norm


@dataclass(frozen=True)
class GateTensors:
    alpha: object
    beta: object
    gamma: object


@dataclass(frozen=True)
class AlifState:
    v: object  # membrane potential [C,Hs,Ws]
    s: object  # binary spikes [C,Hs,Ws]


def alif_step(v_prev, syn, gates, v_peak=1.0, slope=4.0, gain=1.0,
              relaxation="surrogate"):
    """One adaptive-LIF step. `syn` is the summed synaptic drive
    (recurrent + feedforward conv outputs).

    `relaxation` picks the spike nonlinearity: "surrogate" (default) is
    the hard step with the sigmoid-derivative backward; "relu" swaps in
    the 1-Lipschitz ramp, making the whole update an ordinary
    differentiable map — the form the stability analysis assumes and
    finite-difference gradient checks can probe.
    """
    if relaxation not in ("surrogate", "relu"):
        raise ValueError(f"relaxation must be 'surrogate' or 'relu', "
                         f"got {relaxation!r}")
    one_minus = 1.0 - gates.alpha
    h = ad.add(ad.mul(gates.alpha, v_prev), ad.mul(one_minus, syn))
    v_th = ad.mul(gates.beta, v_peak)
    z = h - v_th
    if relaxation == "relu":
        s = ad.relu(z)
    else:
        s = ad.heaviside_surrogate(z, slope=slope, gain=gain)
    v = h - ad.mul(gates.gamma, ad.mul(s, v_th))
    return AlifState(v=v, s=s)


class AlifLayer:
    def __init__(self, bag, name, hidden, x_ch, has_ff, norm_groups=8,
                 v_peak=1.0, slope=4.0, gain=1.0, use_gn=True):
        if hidden % norm_groups:
            raise ValueError(f"hidden {hidden} not divisible by norm groups "
                             f"{norm_groups}")
        self.v_peak = float(v_peak)
        self.slope = float(slope)
        self.gain = float(gain)
        self.use_gn = use_gn
        gate_in = hidden + x_ch
        self.gate_convs = {}
        self.gate_norms = {}
        for g in ("alpha", "beta", "gamma"):
            self.gate_convs[g] = Conv(bag, f"{name}.{g}", gate_in, hidden, 3,
                                      bias=False)
            self.gate_norms[g] = Norm(bag, f"{name}.{g}_norm", hidden,
                                      groups=norm_groups)
        self.w_rec = Conv(bag, f"{name}.rec", hidden, hidden, 3, bias=False)
        self.w_ff = Conv(bag, f"{name}.ff", hidden, hidden, 3,
                         bias=False) if has_ff else None

    def gates(self, s_prev, x, c_alpha, c_beta, c_gamma):
        inp = ad.concat([s_prev, x], axis=0)
        out = {}
        for g, c in (("alpha", c_alpha), ("beta", c_beta), ("gamma", c_gamma)):
            y = self.gate_convs[g](inp)
            if self.use_gn:
                y = self.gate_norms[g](y)
            out[g] = ad.sigmoid(ad.add(y, c))
        return GateTensors(**out)

    def step(self, state, below_spikes, x, c_alpha, c_beta, c_gamma):
        """Advance one step. `below_spikes` is the upsampled fresh spike
        map of the coarser layer, or None on the coarsest layer."""
        gates = self.gates(state.s, x, c_alpha, c_beta, c_gamma)
        syn = self.w_rec(state.s)
        if below_spikes is not None:
            if self.w_ff is None:
                raise ValueError("layer has no feedforward kernel but "
                                 "received below-layer spikes")
            syn = ad.add(syn, self.w_ff(below_spikes))
        return alif_step(state.v, syn, gates, self.v_peak, self.slope, self.gain)


class RsnnStack:
    """The coarse-to-fine trio of AlifLayers plus state bootstrap."""

    def __init__(self, bag, hidden, motion_ch, norm_groups=8, v_peak=1.0,
                 slope=4.0, gain=1.0, use_gn=True, name="rsnn"):
        self.hidden = hidden
        common = dict(norm_groups=norm_groups, v_peak=v_peak, slope=slope,
                      gain=gain, use_gn=use_gn)
        self.layers = {
            16: AlifLayer(bag, f"{name}.l16", hidden, x_ch=hidden,
                          has_ff=False, **common),
            8: AlifLayer(bag, f"{name}.l8", hidden, x_ch=hidden,
                         has_ff=True, **common),
            4: AlifLayer(bag, f"{name}.l4", hidden, x_ch=hidden + motion_ch,
                         has_ff=True, **common),
        }

    def init_state(self, ctx_set):
        """s starts at zero; v starts at tanh(seed) so it is bounded and
        differentiable back into the context net."""
        states = {}
        for scale in SCALES:
            seed = ctx_set.seed[scale]
            states[scale] = AlifState(v=ad.tanh(seed),
                                      s=ad.zeros(seed.shape))
        return states

    def update(self, states, ctx_set, motion):
        """One coarse-to-fine sweep; returns fresh states at all scales."""
        for scale in SCALES:
            if states[scale].s.shape != ctx_set.ctx[scale].shape:
                raise ad.ShapeError(
                    f"state/context mismatch at 1/{scale}: "
                    f"{states[scale].s.shape} vs {ctx_set.ctx[scale].shape}")
        new = {}
        new[16] = self.layers[16].step(
            states[16], None, ctx_set.ctx[16],
            ctx_set.c_alpha[16], ctx_set.c_beta[16], ctx_set.c_gamma[16])
        new[8] = self.layers[8].step(
            states[8], ad.bilinear_up2(new[16].s), ctx_set.ctx[8],
            ctx_set.c_alpha[8], ctx_set.c_beta[8], ctx_set.c_gamma[8])
        x4 = ad.concat([ctx_set.ctx[4], motion], axis=0)
        new[4] = self.layers[4].step(
            states[4], ad.bilinear_up2(new[8].s), x4,
            ctx_set.c_alpha[4], ctx_set.c_beta[4], ctx_set.c_gamma[4])
        return new
