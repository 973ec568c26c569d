"""Images, flow fields and their on-disk formats.

Images are float arrays of shape (H, W, C) with C in {1, 3} and values in
[0, 1]; flow fields are float arrays of shape (H, W, 2) holding (u, v) in
pixels per frame, u to the right and v downwards.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ShapeError

log = logging.getLogger(__name__)

FLO_MAGIC = 202021.25


# ---------------------------------------------------------------------------
# Middlebury .flo
# ---------------------------------------------------------------------------

def write_flo(flow, path):
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ShapeError(f"flow must be HxWx2, got {flow.shape}")
    h, w = flow.shape[:2]
    payload = np.ascontiguousarray(flow, dtype="<f4").tobytes()
    Path(path).write_bytes(struct.pack("<fii", FLO_MAGIC, w, h) + payload)


def read_flo(path):
    """Read a Middlebury ``.flo`` file into a float32 (H, W, 2) array."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header ({len(data)} of 12 bytes)")
    magic, w, h = struct.unpack_from("<fii", data, 0)
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0, expected {FLO_MAGIC}")
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: nonpositive dimensions {w}x{h} at byte 4")
    need = 12 + 8 * w * h
    if len(data) < need:
        raise FormatError(f"{path}: truncated payload at byte {len(data)}, expected {need} bytes")
    if len(data) > need:
        raise FormatError(f"{path}: {len(data) - need} trailing bytes after byte {need}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)


# ---------------------------------------------------------------------------
# binary PGM / PPM
# ---------------------------------------------------------------------------

def write_image(image, path):
    """Write a (H, W, 1|3) or (H, W) image in [0, 1] as binary PGM or PPM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ShapeError(f"image must be HxWx1 or HxWx3, got {img.shape}")
    h, w, c = img.shape
    raster = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + raster.tobytes())


def _header_tokens(data, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("malformed header: unexpected end of file")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_image(path):
    """Read binary PGM (P5) or PPM (P6) with maxval 255."""
    data = Path(path).read_bytes()
    try:
        tokens, pos = _header_tokens(data, 4)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported magic {magic!r}, expected P5 or P6")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed header {tokens!r}") from None
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: nonpositive dimensions {w}x{h}")
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} not supported, expected 255")
    c = 1 if magic == b"P5" else 3
    need = w * h * c
    if len(data) - pos < need:
        raise FormatError(f"{path}: truncated raster at byte {len(data)}, expected {pos + need} bytes")
    raster = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return raster.reshape(h, w, c).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# label construction and augmentation
# ---------------------------------------------------------------------------

def average_flows(fields):
    """Per-pixel mean of several flow fields of identical shape."""
    fields = [np.asarray(f, dtype=np.float64) for f in fields]
    if not fields:
        raise ValueError("average_flows needs at least one field")
    shape = fields[0].shape
    for f in fields[1:]:
        if f.shape != shape:
            raise ShapeError(f"flow shapes differ: {shape} vs {f.shape}")
    return np.mean(np.stack(fields), axis=0)


def flip_horizontal(image, flow):
    """Mirror columns of both arrays; the u component of the flow changes sign."""
    img = image[:, ::-1].copy()
    fl = flow[:, ::-1].copy()
    fl[..., 0] = -fl[..., 0]
    return img, fl


def augment(image, flow, flip=False, origin=(0, 0), size=None):
    """Crop the same window from ``image`` and ``flow``, then optionally flip.

    ``origin`` is the (row, column) of the crop's top-left pixel and ``size``
    its (height, width); ``None`` keeps the full frame.
    """
    h, w = image.shape[:2]
    if flow.shape[:2] != (h, w):
        raise ShapeError(f"image {image.shape[:2]} and flow {flow.shape[:2]} differ in size")
    ch, cw = (h, w) if size is None else size
    y, x = origin
    if y < 0 or x < 0 or ch < 1 or cw < 1 or y + ch > h or x + cw > w:
        raise ValueError(f"crop {ch}x{cw} at {origin} outside a {h}x{w} frame")
    img, fl = image[y:y + ch, x:x + cw], flow[y:y + ch, x:x + cw]
    if flip:
        return flip_horizontal(img, fl)
    return img.copy(), fl.copy()


def resize_nearest(image, flow, out_h, out_w):
    """Nearest-neighbour resize; flow vectors are rescaled with the axes."""
    h, w = image.shape[:2]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    img = image[rows][:, cols]
    if flow is None:
        return img, None
    fl = flow[rows][:, cols].astype(np.float64)
    fl[..., 0] *= out_w / w
    fl[..., 1] *= out_h / h
    return img, fl


def resize_short_side(image, flow, crop_size, ratio=1.2):
    """Scale so the short side is ``round(ratio * crop_size)``; no-op if already there."""
    h, w = image.shape[:2]
    target = int(round(ratio * crop_size))
    if min(h, w) == target:
        return image, flow
    scale = target / min(h, w)
    return resize_nearest(image, flow, max(target, int(round(h * scale))),
                          max(target, int(round(w * scale))))


def center_origin(shape, size):
    h, w = shape[:2]
    return (h - size[0]) // 2, (w - size[1]) // 2


def random_origin(rng, shape, size):
    h, w = shape[:2]
    return int(rng.integers(0, h - size[0] + 1)), int(rng.integers(0, w - size[1] + 1))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class Record:
    image: Path
    flows: list


def read_manifest(path):
    """Parse ``image <TAB> flo_1 ... flo_k`` lines; relative paths are taken
    from the manifest's directory."""
    path = Path(path)
    root = path.parent
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) == 2 and " " in parts[1].strip():
            parts = [parts[0]] + parts[1].split()
        parts = [p.strip() for p in parts if p.strip()]
        if len(parts) < 2:
            raise FormatError(f"{path}:{lineno}: expected an image and at least one flow file")
        records.append(Record(root / parts[0], [root / p for p in parts[1:]]))
    return records


def write_manifest(path, records):
    path = Path(path)
    lines = []
    for rec in records:
        items = [rec.image] + list(rec.flows)
        lines.append("\t".join(_relative(p, path.parent) for p in items))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _relative(p, root):
    p = Path(p)
    try:
        return p.relative_to(root).as_posix()
    except ValueError:
        return str(p)


def load_record(rec):
    """Return (image, averaged flow) for a manifest record."""
    image = read_image(rec.image)
    flow = average_flows([read_flo(f) for f in rec.flows])
    if flow.shape[:2] != image.shape[:2]:
        raise DataError(f"{rec.image}: image {image.shape[:2]} and flow {flow.shape[:2]} differ")
    return image, flow


def load_records(records):
    """Load every record, skipping (and counting) the unreadable ones."""
    items, skipped = [], 0
    for rec in records:
        try:
            items.append(load_record(rec))
        except (OSError, ValueError) as exc:
            skipped += 1
            log.warning("skipping %s: %s", rec.image, exc)
    if skipped:
        log.warning("skipped %d of %d manifest records", skipped, len(records))
    if not items:
        raise DataError("no readable records in manifest")
    return items, skipped


def to_gray(image):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img @ np.array([0.299, 0.587, 0.114])
