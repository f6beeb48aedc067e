"""Density, selection, and approximation rasters over the embedding.

All three fields splat a truncated, unnormalized Gaussian kernel
G(d, h) = exp(-d^2 / 2h^2), cut off at radius 3h, onto a uniform pixel grid
with square pixels. The density field is the plain kernel average; the
selection and approximation fields are ratios against the same kernel sums,
so both live in [0, 1] by construction. Rasters serialize to a tiny binary
format for the UI fallback path and for golden-image tests.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numba import njit

from .optimizer import Embedding

FIELD_MAGIC = b"ATSF"
DEFAULT_GRID = 512
TRUNCATION_RADII = 3.0
SELECTION_THRESHOLD = 0.5
LENS_EXPONENT = 2.0


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    origin_x: float     # embedding coords of the outer corner of pixel (0, 0)
    origin_y: float
    scale: float        # embedding units per pixel, square pixels

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("grid must be at least 1x1")
        if not self.scale > 0.0:
            raise ValueError("grid scale must be positive")

    @classmethod
    def fit(cls, positions: np.ndarray, h: float,
            width: int = DEFAULT_GRID, height: int = DEFAULT_GRID) -> "GridSpec":
        """Cover the position bbox padded by the truncation radius."""
        pad = TRUNCATION_RADII * h
        lo = positions.min(axis=0) - pad
        hi = positions.max(axis=0) + pad
        scale = max((hi[0] - lo[0]) / width, (hi[1] - lo[1]) / height)
        if not scale > 0.0:
            scale = 1e-9
        return cls(int(width), int(height), float(lo[0]), float(lo[1]),
                   float(scale))

    def pixel_centers(self):
        xs = self.origin_x + (np.arange(self.width) + 0.5) * self.scale
        ys = self.origin_y + (np.arange(self.height) + 0.5) * self.scale
        return xs, ys


@dataclass
class FieldGrid:
    spec: GridSpec
    values: np.ndarray   # (height, width) float64

    def __post_init__(self):
        if self.values.shape != (self.spec.height, self.spec.width):
            raise ValueError("raster shape disagrees with grid spec")


@njit(cache=True)
def _splat(values, px, py, weights, origin_x, origin_y, scale, h,
           width, height):
    r = TRUNCATION_RADII * h
    r2 = r * r
    inv = 1.0 / (2.0 * h * h)
    for n in range(px.shape[0]):
        x = px[n]
        y = py[n]
        w = weights[n]
        ix0 = int(np.floor((x - r - origin_x) / scale - 0.5))
        ix1 = int(np.ceil((x + r - origin_x) / scale - 0.5))
        iy0 = int(np.floor((y - r - origin_y) / scale - 0.5))
        iy1 = int(np.ceil((y + r - origin_y) / scale - 0.5))
        if ix0 < 0:
            ix0 = 0
        if iy0 < 0:
            iy0 = 0
        if ix1 > width - 1:
            ix1 = width - 1
        if iy1 > height - 1:
            iy1 = height - 1
        for iy in range(iy0, iy1 + 1):
            cy = origin_y + (iy + 0.5) * scale
            dy = cy - y
            dy2 = dy * dy
            if dy2 > r2:
                continue
            for ix in range(ix0, ix1 + 1):
                cx = origin_x + (ix + 0.5) * scale
                dx = cx - x
                d2 = dx * dx + dy2
                if d2 <= r2:
                    values[iy, ix] += w * np.exp(-d2 * inv)


def _kernel_sum(positions: np.ndarray, weights: np.ndarray,
                spec: GridSpec, h: float) -> np.ndarray:
    values = np.zeros((spec.height, spec.width))
    _splat(values, np.ascontiguousarray(positions[:, 0]),
           np.ascontiguousarray(positions[:, 1]),
           np.ascontiguousarray(weights, dtype=np.float64),
           spec.origin_x, spec.origin_y, spec.scale, float(h),
           spec.width, spec.height)
    return values


def density_field(emb: Embedding, h: float,
                  spec: GridSpec | None = None) -> FieldGrid:
    """Average truncated-kernel density of all live points."""
    if not h > 0.0:
        raise ValueError("bandwidth must be positive")
    rows = emb.points.live_rows()
    if rows.shape[0] == 0:
        raise ValueError("density needs at least one live point")
    pos = emb.pos[rows]
    if spec is None:
        spec = GridSpec.fit(pos, h)
    vals = _kernel_sum(pos, np.ones(rows.shape[0]), spec, h)
    return FieldGrid(spec, vals / rows.shape[0])


def selection_field(emb: Embedding, selected, h: float, spec: GridSpec,
                    density: FieldGrid) -> FieldGrid:
    """Share of local density owned by the selected ids, in [0, 1]."""
    if not h > 0.0:
        raise ValueError("bandwidth must be positive")
    if density.spec != spec:
        raise ValueError("density raster computed on a different grid")
    pts = emb.points
    sel = np.asarray(sorted({int(s) for s in selected}), dtype=np.int64)
    out = np.zeros((spec.height, spec.width))
    if sel.shape[0] == 0:
        return FieldGrid(spec, out)
    if np.any(pts.row_of[sel] < 0):
        raise ValueError("selection contains dead ids")
    n = pts.n_live
    num = _kernel_sum(emb.pos[pts.row_of[sel]], np.ones(sel.shape[0]), spec, h)
    denom = density.values * n
    np.divide(num, denom, out=out, where=denom > 0.0)
    return FieldGrid(spec, out)


def approximation_field(emb: Embedding, precisions, h: float, spec: GridSpec,
                        density: FieldGrid) -> FieldGrid:
    """Kernel-weighted local average of per-point precision, in [0, 1].

    precisions maps id -> rho, or is an array aligned with live ids
    ascending.
    """
    if not h > 0.0:
        raise ValueError("bandwidth must be positive")
    if density.spec != spec:
        raise ValueError("density raster computed on a different grid")
    pts = emb.points
    ids = pts.live_ids()
    if isinstance(precisions, dict):
        rho = np.array([float(precisions[int(i)]) for i in ids])
    else:
        rho = np.asarray(precisions, dtype=np.float64)
        if rho.shape[0] != ids.shape[0]:
            raise ValueError("precision array does not cover the live points")
    if np.any(rho < 0.0) or np.any(rho > 1.0):
        raise ValueError("precisions must lie in [0, 1]")
    pos = emb.pos[pts.row_of[ids]]
    num = _kernel_sum(pos, rho, spec, h)
    denom = density.values * ids.shape[0]
    out = np.zeros((spec.height, spec.width))
    np.divide(num, denom, out=out, where=denom > 0.0)
    return FieldGrid(spec, out)


def lens_alpha(a_value: float, k: float = LENS_EXPONENT) -> float:
    """Overlay opacity for a local approximation level: 1 - a^k."""
    if not 0.0 <= a_value <= 1.0:
        raise ValueError("approximation value must lie in [0, 1]")
    if not k > 0.0:
        raise ValueError("exponent must be positive")
    return 1.0 - a_value ** k


def classify_selection(s_field: FieldGrid,
                       threshold: float = SELECTION_THRESHOLD) -> np.ndarray:
    """Boolean mask of pixels dominated by the selection (strict >)."""
    return s_field.values > threshold


# ---------------------------------------------------------------------------
# raster export
# ---------------------------------------------------------------------------

def write_field(grid: FieldGrid, path) -> None:
    header = struct.pack("<4sIII", FIELD_MAGIC, grid.spec.width,
                         grid.spec.height, 0)
    data = grid.values.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data)


def field_payload(grid: FieldGrid) -> bytes:
    """Raster as the wire payload: header plus row-major little-endian f32."""
    return struct.pack("<4sIII", FIELD_MAGIC, grid.spec.width,
                       grid.spec.height, 0) + grid.values.astype("<f4").tobytes(order="C")


def read_field(path) -> tuple[int, int, np.ndarray]:
    """Returns (width, height, values) from a raster file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise ValueError("truncated raster file")
    magic, width, height, _ = struct.unpack("<4sIII", blob[:16])
    if magic != FIELD_MAGIC:
        raise ValueError("not a field raster")
    need = width * height * 4
    if len(blob) != 16 + need:
        raise ValueError("raster payload length mismatch")
    vals = np.frombuffer(blob[16:], dtype="<f4").reshape(height, width)
    return int(width), int(height), vals.astype(np.float64)
