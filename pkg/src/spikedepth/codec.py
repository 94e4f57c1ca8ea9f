"""Integrate-and-fire spike codec.

Converts intensity frame sequences into binary spike streams (each pixel
accumulates intensity and fires on crossing a threshold, with subtractive
reset), serializes streams to the bit-packed ``.dat`` container, and
reconstructs intensity from inter-spike intervals (TFI).

.dat layout, all integers little-endian:

    bytes 0..3    magic ``SPK1``
    bytes 4..7    format version (currently 1)
    bytes 8..19   N, H, W as uint32
    bytes 20..    spikes flattened in (step, row, col) order, packed
                  8 per byte LSB-first, final byte zero-padded

Intensities are dimensionless per-step accumulations; TFI output is in
threshold-units per step (multiply by the encoder threshold to get back
to the input intensity scale).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .backend import kernels as K

MAGIC = b"SPK1"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class CodecError(ValueError):
    """Malformed .dat data."""


def encode(frames, threshold=5.0, noise_std=0.0, seed=0):
    """Run the integrate-and-fire pixel model over ``frames`` [T,H,W].

    Each step adds the frame intensity (plus optional dark-current noise,
    clipped so the instantaneous intensity stays non-negative) to a
    per-pixel accumulator; crossing ``threshold`` emits a spike and
    subtracts the threshold. Returns the uint8 spike stream [T,H,W].
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] < 1:
        raise ValueError(f"frames must be [T,H,W] with T >= 1, got {frames.shape}")
    if frames.min() < 0.0 or frames.max() > 1.0:
        raise ValueError("frame intensities must lie in [0, 1]")
    if threshold <= 0.0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    if noise_std < 0.0:
        raise ValueError(f"noise_std must be non-negative, got {noise_std}")
    noise = None
    if noise_std > 0.0:
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, noise_std, size=frames.shape)
    spikes, residual = K.encode_fwd(frames, float(threshold), noise)
    assert residual.min() >= 0.0 and residual.max() < threshold
    return spikes


def pack_dat(spikes):
    """Serialize a binary stream [N,H,W] to .dat bytes."""
    spikes = np.asarray(spikes)
    if spikes.ndim != 3:
        raise ValueError(f"stream must be [N,H,W], got shape {spikes.shape}")
    flat = spikes.reshape(-1).astype(np.uint8)
    if flat.size and flat.max() > 1:
        raise ValueError("stream values must be 0 or 1")
    n, h, w = spikes.shape
    header = _HEADER.pack(MAGIC, VERSION, n, h, w)
    payload = np.packbits(flat, bitorder="little").tobytes()
    return header + payload


def unpack_dat(data):
    """Inverse of pack_dat. Raises CodecError naming the offset and the
    expected vs. actual byte counts on malformed input."""
    if len(data) < _HEADER.size:
        raise CodecError(f"truncated header: expected at least {_HEADER.size} "
                         f"bytes, got {len(data)}")
    magic, version, n, h, w = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CodecError(f"bad magic at offset 0: expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise CodecError(f"unsupported version {version} at offset 4 "
                         f"(expected {VERSION})")
    nbits = n * h * w
    expected = (nbits + 7) // 8
    actual = len(data) - _HEADER.size
    if actual != expected:
        kind = "truncated" if actual < expected else "oversized"
        raise CodecError(f"{kind} payload at offset {_HEADER.size}: expected "
                         f"{expected} bytes for {n}x{h}x{w}, got {actual}")
    packed = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size)
    bits = np.unpackbits(packed, bitorder="little", count=nbits)
    if nbits and bits.size != nbits:
        raise CodecError(f"payload decoded to {bits.size} bits, expected {nbits}")
    return bits.reshape(n, h, w)


def write_dat(path, spikes):
    with open(path, "wb") as f:
        f.write(pack_dat(spikes))


def read_dat(path):
    with open(path, "rb") as f:
        return unpack_dat(f.read())


def tfi_reconstruct(spikes, center_step, max_window):
    """Texture-from-interval intensity at ``center_step`` (1-indexed).

    Per pixel: take the nearest spike at or before the center step and the
    nearest strictly after, both within ``max_window`` steps; the intensity
    is 1/interval in threshold-units per step. Pixels without such a spike
    pair reconstruct to 0.
    """
    spikes = np.ascontiguousarray(np.asarray(spikes, dtype=np.uint8))
    n = spikes.shape[0]
    if not 1 <= center_step <= n:
        raise ValueError(f"center_step {center_step} outside stream of {n} steps")
    if max_window < 1:
        raise ValueError(f"max_window must be >= 1, got {max_window}")
    return K.tfi_fwd(spikes, int(center_step), int(max_window))


@dataclass(frozen=True)
class SubstreamSplit:
    """Three contiguous equal-length substreams of one stream.

    ``parts`` are [L,H,W] each after zero-padding the tail; ``lengths``
    are the unpadded step counts; ``center_step`` is the 1-indexed
    original step at the midpoint of the middle substream — the timestamp
    a disparity estimate from this split refers to.
    """

    parts: tuple
    lengths: tuple
    pad_steps: int
    center_step: int


def center_step(n):
    """1-indexed midpoint of the middle substream of an n-step stream —
    the timestamp a disparity estimate over that stream refers to."""
    if n < 3:
        raise ValueError(f"need at least 3 steps to split, got {n}")
    part_len = -(-n // 3)
    return part_len + (part_len + 1) // 2


def split_substreams(spikes):
    """Split [N,H,W] into three contiguous substreams of ceil(N/3) steps,
    zero-padding the end and recording how many steps were padding."""
    spikes = np.asarray(spikes)
    n = spikes.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 steps to split, got {n}")
    part_len = -(-n // 3)
    pad = 3 * part_len - n
    if pad:
        tail = np.zeros((pad,) + spikes.shape[1:], dtype=spikes.dtype)
        padded = np.concatenate([spikes, tail], axis=0)
    else:
        padded = spikes
    parts = tuple(padded[i * part_len:(i + 1) * part_len] for i in range(3))
    lengths = (part_len, part_len, part_len - pad)
    return SubstreamSplit(parts, lengths, pad, center_step(n))
