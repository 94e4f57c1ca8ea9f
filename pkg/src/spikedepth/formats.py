"""File formats: PFM and PGM images, CSV tables, SVG plots, checkpoints.

Checkpoint container (all integers little-endian):

    bytes 0..3   magic ``SDCK``
    bytes 4..7   manifest length M as uint32
    8 .. 8+M     JSON manifest: {name: {"shape": [...], "offset": bytes
                 into the blob}}, names sorted
    8+M ..       concatenated float32 little-endian parameter data

PFM is the standard grayscale ``Pf`` variant (rows bottom-to-top,
negative scale marking little-endian). PGM is binary ``P5``. CSV floats
are printed with 17 significant digits so equal doubles compare equal
as text. The SVG emitter draws line and scatter plots with no external
plotting dependency.
"""

from __future__ import annotations

import json
import struct

import numpy as np


class FormatError(ValueError):
    pass


# ------------------------------------------------------------------ PFM

def write_pfm(path, image):
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ValueError(f"PFM writer expects [H,W], got {image.shape}")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")  # negative scale: little-endian
        f.write(image[::-1].astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise FormatError(f"{path}: not a grayscale PFM file")
        w, h = (int(tok) for tok in f.readline().split())
        scale = float(f.readline())
        data = f.read(w * h * 4)
        if len(data) != w * h * 4:
            raise FormatError(f"{path}: expected {w * h * 4} pixel bytes, "
                              f"got {len(data)}")
        dtype = "<f4" if scale < 0 else ">f4"
        img = np.frombuffer(data, dtype=dtype).reshape(h, w)
        return np.ascontiguousarray(img[::-1]).astype(np.float64)


# ------------------------------------------------------------------ PGM

def write_pgm(path, image, max_value=None):
    """8-bit binary PGM; float input is scaled so max_value maps to 255
    (default: the image max)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"PGM writer expects [H,W], got {image.shape}")
    top = float(image.max()) if max_value is None else float(max_value)
    scale = 255.0 / top if top > 0 else 1.0
    pixels = np.clip(image * scale, 0, 255).astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise FormatError(f"{path}: not a binary PGM file")
        fields = []
        while len(fields) < 3:
            line = f.readline()
            if not line:
                raise FormatError(f"{path}: truncated header")
            line = line.split(b"#", 1)[0]
            fields.extend(int(tok) for tok in line.split())
        w, h, maxval = fields
        if maxval > 255:
            raise FormatError(f"{path}: only 8-bit PGM supported")
        data = f.read(w * h)
        if len(data) != w * h:
            raise FormatError(f"{path}: expected {w * h} pixel bytes, "
                              f"got {len(data)}")
        return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


# ------------------------------------------------------------------ CSV

def format_float(x):
    return f"{x:.17g}"


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            cells = [format_float(c) if isinstance(c, float) else str(c)
                     for c in row]
            f.write(",".join(cells) + "\n")


def read_csv(path):
    with open(path, "r", encoding="utf-8") as f:
        lines = [line.rstrip("\n") for line in f if line.strip()]
    if not lines:
        raise FormatError(f"{path}: empty CSV")
    header = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:]]
    for row in rows:
        if len(row) != len(header):
            raise FormatError(f"{path}: row width {len(row)} != header "
                              f"width {len(header)}")
    return header, rows


# ----------------------------------------------------------- checkpoint

CKPT_MAGIC = b"SDCK"


def save_checkpoint(path, named_tensors):
    """Write {name: Tensor-or-array} as float32 with a JSON manifest."""
    manifest = {}
    blobs = []
    offset = 0
    for name in sorted(named_tensors):
        t = named_tensors[name]
        data = np.asarray(t.data if hasattr(t, "data") else t, dtype="<f4")
        manifest[name] = {"shape": list(data.shape), "offset": offset}
        blobs.append(data.tobytes())
        offset += data.nbytes
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Read a checkpoint back as {name: float64 array}."""
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) < 8 or head[:4] != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint (bad magic)")
        (mlen,) = struct.unpack("<I", head[4:])
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        blob = f.read()
    out = {}
    for name, entry in manifest.items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise FormatError(f"{path}: tensor '{name}' extends past end of "
                              f"file ({end} > {len(blob)})")
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape)
        out[name] = arr.astype(np.float64)
    return out


def apply_checkpoint(bag, state):
    """Load arrays into a ParamBag, validating names and shapes both ways."""
    params = bag.named()
    missing = sorted(set(params) - set(state))
    extra = sorted(set(state) - set(params))
    if missing or extra:
        raise FormatError(f"checkpoint/model mismatch: missing {missing[:5]}, "
                          f"unexpected {extra[:5]}")
    for name, tensor in params.items():
        if tuple(state[name].shape) != tensor.data.shape:
            raise FormatError(f"checkpoint tensor '{name}' has shape "
                              f"{state[name].shape}, model expects "
                              f"{tensor.data.shape}")
        tensor.data = state[name].astype(tensor.data.dtype)


# ------------------------------------------------------------------ SVG

_PALETTE = ("#2266cc", "#cc4422", "#22aa66", "#8844cc", "#ccaa22", "#44aacc")


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10.0 ** np.floor(np.log10(raw))
    step = min(s for s in (mag, 2 * mag, 5 * mag, 10 * mag) if s >= raw)
    start = np.ceil(lo / step) * step
    return np.arange(start, hi + step / 2, step)


def svg_plot(path, series, title="", xlabel="", ylabel="", kind="line",
             width=640, height=420):
    """Minimal line/scatter plot. ``series`` maps label -> (xs, ys)."""
    if kind not in ("line", "scatter"):
        raise ValueError(f"unknown plot kind '{kind}'")
    ml, mr, mt, mb = 62, 16, 34, 46
    pw, ph = width - ml - mr, height - mt - mb
    xs_all = np.concatenate([np.asarray(x, dtype=float) for x, _ in series.values()])
    ys_all = np.concatenate([np.asarray(y, dtype=float) for _, y in series.values()])
    if xs_all.size == 0:
        raise ValueError("nothing to plot")
    x_lo, x_hi = float(xs_all.min()), float(xs_all.max())
    y_lo, y_hi = float(ys_all.min()), float(ys_all.max())
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.04 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def sx(x):
        return ml + (x - x_lo) / (x_hi - x_lo) * pw

    def sy(y):
        return mt + ph - (y - y_lo) / (y_hi - y_lo) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
    ]
    for tx in _ticks(x_lo, x_hi):
        parts.append(f'<line x1="{sx(tx):.1f}" y1="{mt + ph}" x2="{sx(tx):.1f}" '
                     f'y2="{mt + ph + 4}" stroke="black"/>')
        parts.append(f'<text x="{sx(tx):.1f}" y="{mt + ph + 17}" '
                     f'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="10">{tx:g}</text>')
    for ty in _ticks(y_lo, y_hi):
        parts.append(f'<line x1="{ml - 4}" y1="{sy(ty):.1f}" x2="{ml}" '
                     f'y2="{sy(ty):.1f}" stroke="black"/>')
        parts.append(f'<text x="{ml - 7}" y="{sy(ty) + 3:.1f}" '
                     f'text-anchor="end" font-family="sans-serif" '
                     f'font-size="10">{ty:g}</text>')
    parts.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" '
                 f'fill="none" stroke="black"/>')
    parts.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 10}" '
                 f'text-anchor="middle" font-family="sans-serif" '
                 f'font-size="12">{xlabel}</text>')
    parts.append(f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="12" '
                 f'transform="rotate(-90 16 {mt + ph / 2:.1f})">{ylabel}</text>')
    for i, (label, (xs, ys)) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = [(sx(float(x)), sy(float(y))) for x, y in zip(xs, ys)]
        if kind == "line":
            coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
            parts.append(f'<polyline points="{coords}" fill="none" '
                         f'stroke="{color}" stroke-width="1.5"/>')
        else:
            for x, y in pts:
                parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.4" '
                             f'fill="{color}" fill-opacity="0.75"/>')
        parts.append(f'<text x="{ml + pw - 8}" y="{mt + 16 + 14 * i}" '
                     f'text-anchor="end" font-family="sans-serif" '
                     f'font-size="11" fill="{color}">{label}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts) + "\n")
