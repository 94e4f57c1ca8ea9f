"""All-pairs correlation volume, pyramid, and local cost lookup.

The volume C[i,j,k] is the channel inner product of left pixel (i,j)
and right pixel (i,k), scaled by 1/sqrt(C). The pyramid halves the
right-coordinate axis with kernel-2 stride-2 average pooling, four
levels total. Lookup samples every level at (j - d)/2^L + delta for
delta in [-radius, radius] with linear interpolation (clamp-to-edge),
so the result stays differentiable in both the features and the
disparity.

Sign convention: disparity d >= 0 moves the match left in the right
image (right coordinate = j - d), i.e. larger d means closer.
"""

from __future__ import annotations

from . import autodiff as ad

LEVELS = 4
DEFAULT_RADIUS = 4


def build_volume(f_left, f_right):
    return ad.corr_volume(f_left, f_right)


def build_pyramid(volume):
    w = volume.shape[-1]
    if w < 8:
        raise ad.ShapeError(f"pyramid needs last dim >= 8 to survive "
                            f"{LEVELS} levels, got {w}")
    levels = [volume]
    for _ in range(LEVELS - 1):
        levels.append(ad.avg_pool_lastdim(levels[-1], 2, 2))
    return levels


def lookup(pyramid, disparity, radius=DEFAULT_RADIUS):
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    return ad.corr_lookup(pyramid, disparity, radius)
