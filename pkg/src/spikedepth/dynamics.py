"""Stability analysis of the recurrent update under fixed gates.

With the three gates frozen to scalars, the threshold is the constant
v_th = beta * v_peak and each neuron's recurrent output is its reset
charge gamma * v_th * theta(u - v_th). ``theory mode`` iterates exactly
that reduced membrane map on R^N:

    F(u) = alpha * u + (1 - alpha) * (W_rec @ charge(u) + drive)

When theta is the 1-Lipschitz ramp (``relu`` relaxation), F is globally
Lipschitz with constant

    L = alpha + (1 - alpha) * gamma * beta * v_peak * ||W_rec||

and L < 1 certifies a contraction: a unique fixed point u*, geometric
convergence, and the a-priori bound ||u_k - u*|| <= L^k/(1-L) *
||u_1 - u_0||. With the binary step (``heaviside``) the map is not
Lipschitz — ratios are reported but never asserted against L.

The full per-layer state (h, v, s, v_th) is still available for traces:
``lift`` reconstructs all four blocks from a membrane iterate, and the
trained network's per-iteration snapshots produce the reported (never
asserted) difference curves.

W_rec may be a dense [N, N] matrix acting on flat states or a
[C, C, kh, kw] kernel applied with stride 1 and zero padding to
[C, H, W] states. Norms are Euclidean over the flattened state.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .backend import kernels as K
from .formats import write_csv


# ---------------------------------------------------------- linear ops

def _is_conv_kernel(w):
    return w.ndim == 4


def _apply(w, x):
    if _is_conv_kernel(w):
        return K.conv2d_fwd(np.ascontiguousarray(x), w, 1, w.shape[2] // 2)
    return w @ x


def _apply_adjoint(w, y):
    if _is_conv_kernel(w):
        h, wd = y.shape[1], y.shape[2]
        return K.conv2d_bwd_x(np.ascontiguousarray(y), w, 1, w.shape[2] // 2,
                              h, wd)
    return w.T @ y


def spectral_norm(w, state_shape=None, iters=200, tol=1e-10, seed=0):
    """Largest singular value of the operator, by power iteration on
    A^T A (at most ``iters`` rounds or relative change < ``tol``).

    Dense [N, N] matrices act on flat vectors; [C, C, kh, kw] kernels
    act on [C, H, W] states (``state_shape`` required, zero padding).
    """
    w = np.asarray(w, dtype=np.float64)
    if _is_conv_kernel(w):
        if state_shape is None:
            raise ValueError("state_shape is required for a conv operator")
        if w.shape[0] != w.shape[1] or w.shape[0] != state_shape[0]:
            raise ValueError(f"kernel {w.shape} is not a self-map on "
                             f"states {state_shape}")
        x = np.random.default_rng(seed).standard_normal(state_shape)
    elif w.ndim == 2:
        if w.shape[0] != w.shape[1]:
            raise ValueError(f"recurrent matrix must be square, got {w.shape}")
        x = np.random.default_rng(seed).standard_normal(w.shape[1])
    else:
        raise ValueError(f"operator must be [N,N] or [C,C,kh,kw], got {w.shape}")
    x /= np.linalg.norm(x)
    sigma = 0.0
    for _ in range(iters):
        y = _apply(w, x)
        x = _apply_adjoint(w, y)
        nx = np.linalg.norm(x)
        if nx == 0.0:
            return 0.0
        x /= nx
        new_sigma = float(np.sqrt(nx))
        if sigma and abs(new_sigma - sigma) <= tol * sigma:
            return new_sigma
        sigma = new_sigma
    return sigma


def lipschitz_bound(alpha, beta, gamma, v_peak, w_rec_norm):
    """L = alpha + (1-alpha)*gamma*beta*v_peak*||W_rec||; the update is a
    certified contraction iff L < 1."""
    for name, g in (("alpha", alpha), ("beta", beta), ("gamma", gamma)):
        if not 0.0 < g < 1.0:
            raise ValueError(f"{name} must lie in (0, 1), got {g}")
    if v_peak <= 0:
        raise ValueError(f"v_peak must be positive, got {v_peak}")
    if w_rec_norm < 0:
        raise ValueError(f"operator norm must be nonnegative, got {w_rec_norm}")
    return alpha + (1.0 - alpha) * gamma * beta * v_peak * w_rec_norm


# --------------------------------------------------------- theory mode

@dataclass(frozen=True)
class TheoryParams:
    """Fixed-gate operating point: scalar gates, a recurrent operator,
    and a constant drive (the feedforward term, absorbed as a constant)."""
    alpha: float
    beta: float
    gamma: float
    v_peak: float
    w_rec: np.ndarray
    drive: np.ndarray | float = 0.0
    relaxation: str = "relu"
    state_shape: tuple = None

    def __post_init__(self):
        if self.relaxation not in ("relu", "heaviside"):
            raise ValueError(f"relaxation must be 'relu' or 'heaviside', "
                             f"got '{self.relaxation}'")
        w = np.asarray(self.w_rec, dtype=np.float64)
        object.__setattr__(self, "w_rec", w)
        shape = self.state_shape
        if shape is None:
            if _is_conv_kernel(w):
                raise ValueError("state_shape is required for a conv operator")
            shape = (w.shape[1],)
        object.__setattr__(self, "state_shape", tuple(shape))
        for name, g in (("alpha", self.alpha), ("beta", self.beta),
                        ("gamma", self.gamma)):
            if not 0.0 < g < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {g}")
        if self.v_peak <= 0:
            raise ValueError(f"v_peak must be positive, got {self.v_peak}")

    @property
    def v_th(self):
        return self.beta * self.v_peak

    def w_norm(self, **kw):
        return spectral_norm(self.w_rec, state_shape=self.state_shape, **kw)

    def lipschitz(self, **kw):
        return lipschitz_bound(self.alpha, self.beta, self.gamma,
                               self.v_peak, self.w_norm(**kw))

    def activation(self, u):
        """theta(u - v_th): 1-Lipschitz ramp or binary step."""
        z = u - self.v_th
        if self.relaxation == "relu":
            return np.maximum(z, 0.0)
        return (z >= 0.0).astype(np.float64)

    def charge(self, u):
        """Reset charge gamma * v_th * theta(u - v_th) — the recurrent
        signal each neuron emits."""
        return self.gamma * self.v_th * self.activation(u)

    def step(self, u):
        u = np.asarray(u, dtype=np.float64)
        if u.shape != self.state_shape:
            raise ValueError(f"state shape {u.shape} != {self.state_shape}")
        rec = _apply(self.w_rec, self.charge(u))
        return self.alpha * u + (1.0 - self.alpha) * (rec + self.drive)


def random_certified_params(rng, n=16, conv=False, channels=4, side=5,
                            relaxation="relu"):
    """Sample a fixed-gate parameter set with L < 1 by construction: the
    recurrent operator is rescaled so the recurrent term contributes a
    random margin m in (0.3, 0.95) of the available 1 - alpha."""
    alpha = float(rng.uniform(0.05, 0.9))
    beta = float(rng.uniform(0.1, 0.9))
    gamma = float(rng.uniform(0.1, 0.9))
    v_peak = float(rng.uniform(0.5, 2.0))
    margin = float(rng.uniform(0.3, 0.95))
    if conv:
        k = int(rng.choice([1, 3]))
        w = rng.standard_normal((channels, channels, k, k))
        shape = (channels, side, side)
    else:
        w = rng.standard_normal((n, n))
        shape = (n,)
    # certification-grade norm: the rescale below must leave the *true*
    # L within ~1e-11 of the constructed alpha + margin*(1-alpha)
    norm = spectral_norm(w, state_shape=shape, iters=20000, tol=1e-14)
    # target ||W|| so that (1-alpha)*gamma*beta*v_peak*||W|| = margin*(1-alpha)
    w = w * (margin / (gamma * beta * v_peak * norm))
    drive = rng.standard_normal(shape)
    return TheoryParams(alpha=alpha, beta=beta, gamma=gamma, v_peak=v_peak,
                        w_rec=w, drive=drive, relaxation=relaxation,
                        state_shape=shape)


# ----------------------------------------------------- joint-state view

@dataclass(frozen=True)
class JointState:
    """Full per-layer snapshot (h, v, s, v_th); vector() flattens to the
    4N joint coordinates."""
    h: np.ndarray
    v: np.ndarray
    s: np.ndarray
    v_th: np.ndarray

    def vector(self):
        return np.concatenate([np.ravel(self.h), np.ravel(self.v),
                               np.ravel(self.s), np.ravel(self.v_th)])

    @property
    def dim(self):
        return 4 * np.size(self.h)


def lift(u, params):
    """Reconstruct the joint snapshot from a membrane iterate: s and the
    reset follow from u, and the threshold is the constant beta*v_peak."""
    u = np.asarray(u, dtype=np.float64)
    s = params.activation(u)
    return JointState(h=u, v=u - params.charge(u), s=s,
                      v_th=np.full_like(u, params.v_th))


# ------------------------------------------------------------ analyses

def contraction_test(params, pairs=100, scale=3.0, seed=0):
    """||F(u) - F(u')|| / ||u - u'|| over random state pairs. Under the
    relu relaxation every ratio is <= L; heaviside ratios are reported
    only (the step map is not Lipschitz)."""
    rng = np.random.default_rng(seed)
    ratios = np.empty(pairs)
    for i in range(pairs):
        u = scale * rng.standard_normal(params.state_shape)
        v = scale * rng.standard_normal(params.state_shape)
        du = np.linalg.norm((u - v).ravel())
        if du == 0.0:
            ratios[i] = 0.0
            continue
        dF = np.linalg.norm((params.step(u) - params.step(v)).ravel())
        ratios[i] = dF / du
    return ratios


def banach_convergence(params, u0, k_max=50, tol=1e-12, max_iters=200000):
    """Iterate to the fixed point and tabulate, for k <= k_max, the
    measured error ||u_k - u*|| against the a-priori bound
    L^k/(1-L) * ||u_1 - u_0||.

    Returns (u_star, rows) with rows of (k, error, bound). Refuses when
    the certificate fails (L >= 1).
    """
    L = params.lipschitz()
    if L >= 1.0:
        raise ValueError(
            f"not a certified contraction: L = {L:.6f} >= 1 "
            f"(alpha={params.alpha:.3f}, gamma*beta*v_peak*||W|| = "
            f"{(L - params.alpha) / (1 - params.alpha):.6f} of the "
            f"available 1-alpha)")
    u0 = np.asarray(u0, dtype=np.float64)
    iterates = [u0]
    u = u0
    for _ in range(max_iters):
        nxt = params.step(u)
        step_norm = np.linalg.norm((nxt - u).ravel())
        if len(iterates) <= k_max:
            iterates.append(nxt)
        u = nxt
        # posterior bound: ||u_k - u*|| <= L/(1-L) * ||u_k - u_{k-1}||
        if L / (1.0 - L) * step_norm <= tol:
            break
    else:
        raise RuntimeError(f"no fixed point to tol {tol} within "
                           f"{max_iters} iterations (L={L:.6f})")
    u_star = u
    d10 = np.linalg.norm((iterates[1] - iterates[0]).ravel()) \
        if len(iterates) > 1 else 0.0
    rows = []
    for k in range(min(k_max, len(iterates) - 1) + 1):
        err = float(np.linalg.norm((iterates[k] - u_star).ravel()))
        bound = float(L ** k / (1.0 - L) * d10)
        rows.append((k, err, bound))
    return u_star, rows


def jacobian_spectrum(params, u, max_dim=2000):
    """Eigenvalues of dF/du at u for a dense linearization:
    J = alpha*I + (1-alpha) * W * diag(charge'(u)). The binary step uses
    its smooth surrogate derivative so the linearization exists."""
    u = np.asarray(u, dtype=np.float64)
    n = u.size
    if n > max_dim:
        raise ValueError(
            f"state has {n} dims > {max_dim}; dense eigendecomposition "
            f"is quadratic in memory — use power iteration for the top "
            f"modulus instead (spectral_norm on the linearized operator)")
    z = (u - params.v_th).ravel()
    if params.relaxation == "relu":
        act_deriv = (z > 0.0).astype(np.float64)
    else:
        sig = 1.0 / (1.0 + np.exp(-4.0 * z))
        act_deriv = 4.0 * sig * (1.0 - sig)
    w = params.w_rec
    if _is_conv_kernel(w):
        dense = np.empty((n, n))
        basis = np.zeros(params.state_shape)
        flat = basis.ravel()
        for j in range(n):
            flat[j] = 1.0
            dense[:, j] = _apply(w, basis).ravel()
            flat[j] = 0.0
        w = dense
    jac = params.alpha * np.eye(n) + (
        (1.0 - params.alpha) * params.gamma * params.v_th
        * w * act_deriv[np.newaxis, :])
    eig = np.linalg.eigvals(jac)
    return eig


def hidden_state_pca(voltage_batches):
    """Fit a 2-component PCA on pooled per-iteration membrane snapshots
    from >= 3 inputs; returns (projections [T, B, 2], dispersion [T]),
    dispersion being the mean pairwise distance in PC space."""
    if len(voltage_batches) < 3:
        raise ValueError(f"need >= 3 distinct inputs for a dispersion "
                         f"estimate, got {len(voltage_batches)}")
    iters = len(voltage_batches[0])
    if any(len(tr) != iters for tr in voltage_batches):
        raise ValueError("inputs have differing iteration counts")
    stacks = [np.stack([np.ravel(np.asarray(tr[t], dtype=np.float64))
                        for tr in voltage_batches])
              for t in range(iters)]  # [B, N] per iteration
    pooled = np.concatenate(stacks, axis=0)
    if all(np.array_equal(st, np.broadcast_to(st[0], st.shape))
           for st in stacks):
        warnings.warn("identical inputs: PCA dispersion is degenerately 0",
                      RuntimeWarning, stacklevel=2)
    center = pooled.mean(axis=0)
    pooled = pooled - center
    if not np.any(pooled):
        components = np.zeros((2, pooled.shape[1]))
        components[[0, 1], [0, min(1, pooled.shape[1] - 1)]] = 1.0
    else:
        _, _, vt = np.linalg.svd(pooled, full_matrices=False)
        components = vt[:2]
        if components.shape[0] < 2:
            components = np.vstack([components,
                                    np.zeros_like(components[:1])])
    b = len(voltage_batches)
    projections = np.empty((iters, b, 2))
    dispersion = np.empty(iters)
    for t in range(iters):
        proj = (stacks[t] - center) @ components.T
        projections[t] = proj
        acc, cnt = 0.0, 0
        for i in range(b):
            for j in range(i + 1, b):
                acc += float(np.linalg.norm(proj[i] - proj[j]))
                cnt += 1
        dispersion[t] = acc / cnt
    return projections, dispersion


def state_difference_curve(snapshots):
    """||u_t - u_{t-1}|| for a sequence of state snapshots (arrays or
    JointState); the trained network's curve is reported, not asserted."""
    vecs = [s.vector() if isinstance(s, JointState) else np.ravel(s)
            for s in snapshots]
    return np.array([float(np.linalg.norm(b - a))
                     for a, b in zip(vecs[:-1], vecs[1:])])


# --------------------------------------------------------- CSV outputs

def emit_difference_csv(path, diffs):
    write_csv(path, ["iteration", "difference"],
              [(i + 1, float(d)) for i, d in enumerate(diffs)])


def emit_eigenvalue_csv(path, eigenvalues):
    write_csv(path, ["re", "im", "modulus"],
              [(float(e.real), float(e.imag), float(abs(e)))
               for e in eigenvalues])


def emit_banach_csv(path, rows):
    write_csv(path, ["k", "error", "bound"],
              [(k, float(e), float(b)) for k, e, b in rows])


def emit_pca_csv(path, projections, dispersion):
    rows = []
    for t in range(projections.shape[0]):
        for b in range(projections.shape[1]):
            rows.append((t + 1, b, float(projections[t, b, 0]),
                         float(projections[t, b, 1]), float(dispersion[t])))
    write_csv(path, ["iteration", "input", "pc1", "pc2", "dispersion"], rows)
