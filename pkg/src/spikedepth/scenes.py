"""Procedural rectified-stereo scenes with exact ground truth.

A scene is a stack of textured planes (a full-frame background plus
rectangular foreground planes), each at its own depth, optionally
slanted (linear disparity gradient) and translating laterally at
constant velocity. Textures are sums of sinusoid products evaluated at
continuous coordinates, so the right view and every motion offset are
sampled analytically — no image resampling, and the ground-truth
disparity is the closed-form plane disparity, exact by construction.

Views are composed back to front (painter's algorithm). Keyframes are
rendered at both ends of each keyframe interval and the in-between
frames are per-pixel linear blends (the cheap stand-in for a learned
video interpolator), giving (keyframes-1) * interp_factor + 1 frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .refinement import RigCalibration, depth_to_disparity

_AMP_LO, _AMP_SPAN = 0.15, 0.8  # texture range [0.15, 0.95] inside [0,1]


@dataclass(frozen=True)
class PlaneSpec:
    """One textured plane.

    ``rect`` is (x0, y0, x1, y1) in left-image pixels at t=0, or None for
    a full-frame background. ``depth`` is the plane-center depth in
    meters; ``slant`` = (gx, gy) adds a linear disparity gradient about
    the rect center; ``velocity`` is lateral motion in pixels per emitted
    frame; ``texture_seed`` fixes the sinusoid mixture.
    """

    depth: float
    rect: tuple = None
    velocity: float = 0.0
    slant: tuple = (0.0, 0.0)
    texture_seed: int = 0

    def __post_init__(self):
        if self.depth <= 0:
            raise ValueError("plane depth must be positive")
        if abs(self.slant[0]) >= 0.9:
            raise ValueError("horizontal slant too steep (|gx| must be < 0.9)")


@dataclass(frozen=True)
class SceneSpec:
    planes: tuple                      # ordered back to front (far first)
    rig: RigCalibration
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if not self.planes:
            raise ValueError("scene needs at least one plane")


class _Texture:
    """Quasi-periodic analytic texture: mixed sinusoid products."""

    def __init__(self, seed, components=4):
        rng = np.random.default_rng(seed)
        self.fx = rng.uniform(0.04, 0.35, components)
        self.fy = rng.uniform(0.04, 0.35, components)
        self.px = rng.uniform(0, 2 * np.pi, components)
        self.py = rng.uniform(0, 2 * np.pi, components)
        self.amp = rng.uniform(0.5, 1.0, components)

    def __call__(self, u, v):
        acc = np.zeros(np.broadcast_shapes(np.shape(u), np.shape(v)))
        for fx, fy, px, py, a in zip(self.fx, self.fy, self.px, self.py, self.amp):
            acc = acc + a * np.sin(2 * np.pi * fx * u + px) * \
                np.sin(2 * np.pi * fy * v + py)
        norm = (acc / self.amp.sum() + 1.0) / 2.0  # -> [0,1]
        return _AMP_LO + _AMP_SPAN * norm


class _Plane:
    def __init__(self, spec, rig, width, height):
        self.spec = spec
        self.tex = _Texture(spec.texture_seed)
        self.d_center = depth_to_disparity(spec.depth, rig)
        if self.d_center < 0:
            raise ValueError(f"plane at depth {spec.depth} has negative "
                             f"disparity {self.d_center:.3f}")
        if spec.rect is None:
            self.rect = (-1e9, -1e9, 1e9, 1e9)
        else:
            self.rect = tuple(float(r) for r in spec.rect)
        x0, y0, x1, y1 = self.rect
        self.xc = min(max((x0 + x1) / 2, 0.0), width - 1.0)
        self.yc = min(max((y0 + y1) / 2, 0.0), height - 1.0)

    def disparity(self, x, y, t):
        gx, gy = self.spec.slant
        return (self.d_center + gx * (x - self.xc - self.spec.velocity * t)
                + gy * (y - self.yc))

    def render_left(self, xs, ys, t):
        """Returns (occupancy mask, texture values) on the pixel grid."""
        off = self.spec.velocity * t
        x0, y0, x1, y1 = self.rect
        mask = (xs >= x0 + off) & (xs < x1 + off) & (ys >= y0) & (ys < y1)
        return mask, self.tex(xs - off, ys)

    def render_right(self, xs, ys, t):
        """Solve the left coordinate seen at right pixel x_r:
        x_l - d(x_l) = x_r with d linear in x."""
        gx, _ = self.spec.slant
        off = self.spec.velocity * t
        base = self.d_center + self.spec.slant[1] * (ys - self.yc)
        x_l = (xs + base - gx * (self.xc + off)) / (1.0 - gx)
        x0, y0, x1, y1 = self.rect
        mask = (x_l >= x0 + off) & (x_l < x1 + off) & (ys >= y0) & (ys < y1)
        return mask, self.tex(x_l - off, ys)


def _build_planes(spec):
    planes = [_Plane(p, spec.rig, spec.width, spec.height) for p in spec.planes]
    for i in range(len(planes) - 1):
        a, b = planes[i], planes[i + 1]
        if a.d_center > b.d_center + 1e-9:
            raise ValueError(
                f"planes not ordered back-to-front: plane {i} (disparity "
                f"{a.d_center:.3f}) is nearer than plane {i + 1} "
                f"({b.d_center:.3f})")
    for i, a in enumerate(planes):
        for b in planes[i + 1:]:
            if abs(a.d_center - b.d_center) <= 1e-9 and _rects_overlap(a.rect, b.rect):
                raise ValueError(
                    f"overlapping planes at equal depth (disparity "
                    f"{a.d_center:.3f}): occlusion order undefined")
    return planes


def _rects_overlap(ra, rb):
    ax0, ay0, ax1, ay1 = ra
    bx0, by0, bx1, by1 = rb
    return ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1


def _render(planes, width, height, t, side):
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.zeros((height, width))
    covered = np.zeros((height, width), dtype=bool)
    for plane in planes:  # back to front: nearer planes overwrite
        mask, tex = (plane.render_left(xs, ys, t) if side == "left"
                     else plane.render_right(xs, ys, t))
        img[mask] = tex[mask]
        covered |= mask
    return img, covered


def ground_truth(spec, t=0.0):
    """Left-view disparity at emitted-frame time t; exact painter fill of
    the closed-form plane disparities. Uncovered pixels get 0 (invalid)."""
    planes = _build_planes(spec)
    ys, xs = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    gt = np.zeros((spec.height, spec.width))
    for plane in planes:
        mask, _ = plane.render_left(xs, ys, t)
        gt[mask] = plane.disparity(xs, ys, t)[mask]
    return gt


@dataclass(frozen=True)
class SceneSample:
    """Rendered stereo sequence: [F,H,W] intensity stacks per view plus
    the left-view disparity map at the center frame."""
    left: np.ndarray
    right: np.ndarray
    gt: np.ndarray
    center_frame: int


def gen_scene(spec, frames=2, interp_factor=50, center_frame=None):
    """Render a SceneSample. ``frames`` keyframes are blended into
    (frames-1)*interp_factor + 1 emitted frames; gt is evaluated at
    ``center_frame`` (default: the middle emitted frame)."""
    if frames < 2:
        raise ValueError("need at least 2 keyframes")
    if interp_factor < 1:
        raise ValueError("interp_factor must be >= 1")
    planes = _build_planes(spec)
    n_emit = (frames - 1) * interp_factor + 1
    if center_frame is None:
        center_frame = (n_emit - 1) // 2
    if not 0 <= center_frame < n_emit:
        raise ValueError(f"center_frame {center_frame} outside 0..{n_emit - 1}")

    out = {"left": [], "right": []}
    for side in ("left", "right"):
        key = []
        for k in range(frames):
            img, covered = _render(planes, spec.width, spec.height,
                                   k * interp_factor, side)
            if not covered.all():
                raise ValueError("scene does not cover the frame: add a "
                                 "full-frame background plane")
            key.append(img)
        seq = []
        for k in range(frames - 1):
            for i in range(interp_factor):
                a = i / interp_factor
                # key[k] + a*diff (not (1-a)*k0 + a*k1) so identical
                # keyframes interpolate to exactly themselves
                seq.append(key[k] + a * (key[k + 1] - key[k]))
        seq.append(key[-1])
        out[side] = np.stack(seq)
    gt = ground_truth(spec, float(center_frame))
    return SceneSample(left=out["left"], right=out["right"], gt=gt,
                       center_frame=center_frame)


def random_scene(rng, cfg, n_planes=None):
    """Sample a background plus 1-3 foreground planes with modest motion
    and occasional slant, sized for cfg.width x cfg.height."""
    rig = RigCalibration(cfg.baseline, cfg.focal, cfg.principal_offset)
    w, h = cfg.width, cfg.height
    n_fg = int(rng.integers(1, 4)) if n_planes is None else n_planes
    disparities = np.sort(rng.uniform(4.0, 20.0, size=n_fg + 1))
    planes = [PlaneSpec(depth=rig.baseline * rig.focal / disparities[0],
                        rect=None, velocity=float(rng.uniform(-0.02, 0.02)),
                        texture_seed=int(rng.integers(2 ** 31)))]
    for d in disparities[1:]:
        pw = rng.uniform(0.25, 0.6) * w
        ph = rng.uniform(0.25, 0.6) * h
        x0 = rng.uniform(0, w - pw)
        y0 = rng.uniform(0, h - ph)
        slant = ((float(rng.uniform(-0.15, 0.15)), float(rng.uniform(-0.1, 0.1)))
                 if rng.uniform() < 0.5 else (0.0, 0.0))
        planes.append(PlaneSpec(
            depth=rig.baseline * rig.focal / d,
            rect=(float(x0), float(y0), float(x0 + pw), float(y0 + ph)),
            velocity=float(rng.uniform(-0.04, 0.04)),
            slant=slant,
            texture_seed=int(rng.integers(2 ** 31))))
    return SceneSpec(planes=tuple(planes), rig=rig, width=w, height=h)
