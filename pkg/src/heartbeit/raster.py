"""Render preprocessed ECGs to images and cut them into patch grids.

Layout: a 4 x 2 grid of cells filled column-major in the order
I, II, V1, V2 | V3, V4, V5, V6. Traces are black (0.0) on white (1.0).

Image cache container (``.hbrt``), little-endian::

    b"HBRT" | u8 version | u8 len + ascii config hash
    repeated: u16 id len | id utf-8 | u32 width | u32 height | f32 pixels (row-major)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Sequence, Tuple

import numpy as np

from . import binio
from .errors import PatchError, RenderError
from .signal import EcgRecord

RENDER_ORDER = ("I", "II", "V1", "V2", "V3", "V4", "V5", "V6")
LAYOUT = (4, 2)  # rows, cols
NATIVE_CANVAS = 560
TRACE_SPAN = 0.8

CACHE_MAGIC = b"HBRT"
CACHE_VERSION = 1


@dataclass(frozen=True)
class RasterImage:
    pixels: np.ndarray  # (height, width) float32 in [0, 1]
    source_record_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise RenderError(f"pixels must be 2-D, got shape {px.shape}")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    rows: int
    cols: int
    patches: np.ndarray  # (rows * cols, P, P), row-major patch order

    def vectors(self) -> np.ndarray:
        return self.patches.reshape(self.rows * self.cols, -1)

    def __len__(self):
        return self.rows * self.cols


def cell_origin(lead: str, canvas: int = NATIVE_CANVAS) -> Tuple[int, int, int, int]:
    """(top, left, cell_height, cell_width) of a lead's cell on the canvas."""
    if lead not in RENDER_ORDER:
        raise RenderError(f"lead {lead} is not rendered")
    k = RENDER_ORDER.index(lead)
    cell_h, cell_w = canvas // LAYOUT[0], canvas // LAYOUT[1]
    return (k % LAYOUT[0]) * cell_h, (k // LAYOUT[0]) * cell_w, cell_h, cell_w


def _sample_columns(n: int, cell_w: int) -> np.ndarray:
    # round-half-up of i * (cell_w - 1) / (n - 1), in integers
    i = np.arange(n, dtype=np.int64)
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    return (2 * i * (cell_w - 1) + (n - 1)) // (2 * (n - 1))


def _trace_rows(x: np.ndarray, cell_h: int) -> np.ndarray:
    mid = (cell_h - 1) / 2.0
    lo, hi = float(x.min()), float(x.max())
    if hi > lo:
        y = mid - ((x - lo) / (hi - lo) - 0.5) * TRACE_SPAN * (cell_h - 1)
    else:
        y = np.full(x.shape, mid)
    return np.floor(y + 0.5).astype(np.int64)


def _draw_polyline(canvas: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> None:
    """Integer line rasterization of consecutive segments, 1 px wide."""
    x0, y0, dx, dy = xs[:-1], ys[:-1], np.diff(xs), np.diff(ys)
    steps = np.maximum(np.abs(dx), np.abs(dy))
    seg = np.repeat(np.arange(steps.shape[0]), steps + 1)
    starts = np.cumsum(steps + 1) - (steps + 1)
    t = np.arange(seg.shape[0]) - starts[seg]
    n = np.maximum(steps[seg], 1)
    px = x0[seg] + (2 * t * dx[seg] + n) // (2 * n)
    py = y0[seg] + (2 * t * dy[seg] + n) // (2 * n)
    canvas[py, px] = 0.0


def render(record: EcgRecord, canvas: int = NATIVE_CANVAS) -> RasterImage:
    """Draw the eight rendered leads onto a square white canvas."""
    missing = [name for name in RENDER_ORDER if name not in record.leads]
    if missing:
        raise RenderError(f"record {record.record_id}: missing leads {missing}")
    if canvas % LAYOUT[0] or canvas % LAYOUT[1]:
        raise RenderError(f"canvas {canvas} is not divisible by the {LAYOUT} layout")
    img = np.ones((canvas, canvas), dtype=np.float32)
    for name in RENDER_ORDER:
        x = record.leads[name]
        top, left, cell_h, cell_w = cell_origin(name, canvas)
        cols = left + _sample_columns(x.shape[0], cell_w)
        rows = top + _trace_rows(x, cell_h)
        _draw_polyline(img, cols, rows)
    return RasterImage(img, record.record_id)


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row o holds the overlap of input pixel i with output box o, normalized."""
    scale = n_in / n_out
    edges_in = np.arange(n_in + 1, dtype=np.float64)
    lo = np.arange(n_out)[:, None] * scale
    hi = lo + scale
    overlap = np.clip(np.minimum(hi, edges_in[None, 1:]) - np.maximum(lo, edges_in[None, :-1]), 0.0, None)
    return overlap / scale


def resize_pixels(pixels: np.ndarray, side: int) -> np.ndarray:
    h, w = pixels.shape
    if (h, w) == (side, side):
        return pixels.copy()
    out = _area_matrix(h, side) @ pixels.astype(np.float64) @ _area_matrix(w, side).T
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def resize_to(img: RasterImage, side: int = 224) -> RasterImage:
    """Box-filter (area average) resize to ``side`` x ``side``."""
    if side <= 0:
        raise RenderError(f"side must be positive, got {side}")
    return RasterImage(resize_pixels(img.pixels, side), img.source_record_id)


def to_patches(img: RasterImage, patch_size: int = 16) -> PatchGrid:
    h, w = img.pixels.shape
    if patch_size <= 0 or h % patch_size or w % patch_size:
        raise PatchError(f"{h}x{w} image is not divisible into {patch_size}-px patches")
    rows, cols = h // patch_size, w // patch_size
    blocks = img.pixels.reshape(rows, patch_size, cols, patch_size).transpose(0, 2, 1, 3)
    return PatchGrid(patch_size, rows, cols, blocks.reshape(rows * cols, patch_size, patch_size).copy())


def from_patches(grid: PatchGrid, source_record_id: str = "") -> RasterImage:
    p = grid.patch_size
    blocks = grid.patches.reshape(grid.rows, grid.cols, p, p).transpose(0, 2, 1, 3)
    return RasterImage(blocks.reshape(grid.rows * p, grid.cols * p), source_record_id)


def patchify(images: np.ndarray, patch_size: int, channels: int = 1) -> np.ndarray:
    """(B, H, W) images -> (B, n_patches, patch_size**2 * channels) patch vectors.

    With ``channels > 1`` the grayscale value is replicated per pixel,
    giving channel-last ordering inside each patch vector.
    """
    b, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise PatchError(f"{h}x{w} images are not divisible into {patch_size}-px patches")
    rows, cols = h // patch_size, w // patch_size
    x = images.reshape(b, rows, patch_size, cols, patch_size).transpose(0, 1, 3, 2, 4)
    x = x.reshape(b, rows * cols, patch_size * patch_size)
    if channels > 1:
        x = np.repeat(x, channels, axis=-1)
    return np.ascontiguousarray(x)


def sample_span_mask(
    lead: str, start: int, stop: int, n_samples: int, side: int = 224, canvas: int = NATIVE_CANVAS
) -> np.ndarray:
    """Boolean (side, side) mask of the pixels covering samples [start, stop) of a lead's cell.

    The mask spans the full cell height; columns are those the rendered
    samples land on, mapped through the area resize.
    """
    top, left, cell_h, cell_w = cell_origin(lead, canvas)
    start, stop = max(0, start), min(n_samples, stop)
    row_hit, col_hit = np.zeros(canvas), np.zeros(canvas)
    if stop > start:
        cols = left + _sample_columns(n_samples, cell_w)
        row_hit[top : top + cell_h] = 1.0
        col_hit[cols[start] : cols[stop - 1] + 1] = 1.0
    area = _area_matrix(canvas, side)
    return np.outer(area @ row_hit > 1e-9, area @ col_hit > 1e-9)


# --------------------------------------------------------------------------
# Export
# --------------------------------------------------------------------------


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)


def save_png(img: RasterImage, path) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(img.pixels), mode="L").save(path)


def write_cache(path, images: Sequence[RasterImage], config_hash: str = "") -> None:
    with open(path, "wb") as fh:
        fh.write(binio.header(CACHE_MAGIC, CACHE_VERSION, config_hash))
        for img in images:
            fh.write(binio.text(img.source_record_id) + struct.pack("<II", img.width, img.height))
            fh.write(binio.f32(img.pixels))


def read_cache_hash(path) -> str:
    with open(path, "rb") as fh:
        head = fh.read(6)
        head += fh.read(head[5] if len(head) == 6 else 0)
    return binio.parse_header(head, CACHE_MAGIC, CACHE_VERSION, str(path))[0]


def iter_cache(path) -> Iterator[RasterImage]:
    data = Path(path).read_bytes()
    _, pos = binio.parse_header(data, CACHE_MAGIC, CACHE_VERSION, str(path))
    r = binio.Reader(data, pos, str(path))
    while not r.exhausted:
        rid = r.text()
        w, h = r.unpack("<II")
        yield RasterImage(r.f32(w * h).reshape(h, w), rid)


def read_cache(path) -> Tuple[str, List[RasterImage]]:
    return read_cache_hash(path), list(iter_cache(path))
