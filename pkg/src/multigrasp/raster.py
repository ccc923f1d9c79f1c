"""Binary rasters and exact pixel-set geometry.

Pixel (i, j) covers the unit square [i, i+1) x [j, j+1) with its center at
(i + 0.5, j + 0.5); x grows rightward, y downward, origin at the top-left.
Raster bits are stored row-major in one Python int (bit ``j * width + i``),
so set algebra is a word-wise AND/OR and counting is ``int.bit_count``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    DegeneratePolygon,
    DimensionMismatch,
    EmptyRegion,
    InputError,
    NonConvexSweep,
)

Point = tuple[float, float]

_AREA_EPS = 1e-12


@dataclass(frozen=True, slots=True)
class BinaryRaster:
    width: int
    height: int
    bits: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"raster dimensions must be >= 1, got {self.width}x{self.height}")
        if self.bits < 0 or self.bits.bit_length() > self.width * self.height:
            raise ValueError("bit set exceeds raster size")

    @classmethod
    def empty(cls, width: int, height: int) -> BinaryRaster:
        return cls(width, height, 0)

    @classmethod
    def full(cls, width: int, height: int) -> BinaryRaster:
        return cls(width, height, (1 << (width * height)) - 1)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> BinaryRaster:
        """Build a raster from a (height, width) array; nonzero means set."""
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise ValueError(f"expected a 2D array, got shape {arr.shape}")
        h, w = arr.shape
        packed = np.packbits(arr.astype(bool, copy=False).ravel(), bitorder="little")
        return cls(w, h, int.from_bytes(packed.tobytes(), "little"))

    @classmethod
    def from_pixels(cls, width: int, height: int, pixels: Iterable[tuple[int, int]]) -> BinaryRaster:
        bits = 0
        for i, j in pixels:
            if 0 <= i < width and 0 <= j < height:
                bits |= 1 << (j * width + i)
        return cls(width, height, bits)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_array(self) -> np.ndarray:
        """Return a (height, width) bool array."""
        n = self.width * self.height
        raw = self.bits.to_bytes((n + 7) // 8, "little")
        flat = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little", count=n)
        return flat.astype(bool).reshape(self.height, self.width)

    def popcount(self) -> int:
        return self.bits.bit_count()

    def get(self, i: int, j: int) -> bool:
        if not (0 <= i < self.width and 0 <= j < self.height):
            return False
        return (self.bits >> (j * self.width + i)) & 1 == 1

    def pixels(self) -> list[tuple[int, int]]:
        ys, xs = np.nonzero(self.to_array())
        return list(zip(xs.tolist(), ys.tolist()))

    def __and__(self, other: BinaryRaster) -> BinaryRaster:
        return intersection(self, other)

    def __or__(self, other: BinaryRaster) -> BinaryRaster:
        return union(self, other)

    def __invert__(self) -> BinaryRaster:
        return BinaryRaster(self.width, self.height, self.bits ^ ((1 << (self.width * self.height)) - 1))

    def __repr__(self) -> str:
        return f"BinaryRaster({self.width}x{self.height}, popcount={self.popcount()})"


def _check_same(a: BinaryRaster, b: BinaryRaster) -> None:
    if a.width != b.width or a.height != b.height:
        raise DimensionMismatch(f"{a.width}x{a.height} vs {b.width}x{b.height}")


def overlap_count(a: BinaryRaster, b: BinaryRaster) -> int:
    _check_same(a, b)
    return (a.bits & b.bits).bit_count()


def intersection(a: BinaryRaster, b: BinaryRaster) -> BinaryRaster:
    _check_same(a, b)
    return BinaryRaster(a.width, a.height, a.bits & b.bits)


def union(a: BinaryRaster, b: BinaryRaster) -> BinaryRaster:
    _check_same(a, b)
    return BinaryRaster(a.width, a.height, a.bits | b.bits)


def difference(a: BinaryRaster, b: BinaryRaster) -> BinaryRaster:
    """Pixels set in ``a`` but not in ``b``."""
    _check_same(a, b)
    return BinaryRaster(a.width, a.height, a.bits & ~b.bits)


def centroid(r: BinaryRaster) -> Point:
    """Mean of the set-pixel centers."""
    if r.bits == 0:
        raise EmptyRegion("centroid of an empty raster")
    ys, xs = np.nonzero(r.to_array())
    return float(xs.mean()) + 0.5, float(ys.mean()) + 0.5


# --------------------------------------------------------------------------
# polygons


def _next(a: np.ndarray) -> np.ndarray:
    return np.concatenate([a[1:], a[:1]])


def _signed_area(verts: np.ndarray) -> float:
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * float(np.dot(x, _next(y)) - np.dot(_next(x), y))


@dataclass(frozen=True, slots=True)
class Polygon2D:
    """Simple polygon with positively oriented vertices (x, y).

    Construction normalizes orientation so that the shoelace area is positive.
    """

    vertices: tuple[Point, ...]

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        if len(verts) >= 3 and _signed_area(np.asarray(verts)) < 0:
            verts = verts[::-1]
        object.__setattr__(self, "vertices", verts)

    @classmethod
    def from_flat(cls, coords: Sequence[float]) -> Polygon2D:
        if len(coords) % 2:
            raise ValueError("flat coordinate list must have even length")
        return cls(tuple(zip(coords[0::2], coords[1::2])))

    @classmethod
    def rectangle(cls, x0: float, y0: float, x1: float, y1: float) -> Polygon2D:
        return cls(((x0, y0), (x1, y0), (x1, y1), (x0, y1)))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=float).reshape(-1, 2)

    def area(self) -> float:
        if len(self.vertices) < 3:
            return 0.0
        return _signed_area(self.as_array())

    def perimeter(self) -> float:
        v = self.as_array()
        return float(np.linalg.norm(_next(v) - v, axis=1).sum())

    def is_convex(self) -> bool:
        v = self.as_array()
        if len(v) < 3:
            return False
        e = _next(v) - v
        en = _next(e)
        cross = e[:, 0] * en[:, 1] - e[:, 1] * en[:, 0]
        return bool(np.all(cross >= -1e-9))

    def translated(self, dx: float, dy: float) -> Polygon2D:
        return Polygon2D(tuple((x + dx, y + dy) for x, y in self.vertices))

    def transformed(self, angle: float, tx: float, ty: float) -> Polygon2D:
        """Rotate by ``angle`` about the origin, then translate."""
        c, s = math.cos(angle), math.sin(angle)
        return Polygon2D(tuple((c * x - s * y + tx, s * x + c * y + ty) for x, y in self.vertices))


def convex_hull(points: Iterable[Point]) -> list[Point]:
    """Andrew's monotone chain; collinear points are dropped."""
    pts = sorted(set((float(x), float(y)) for x, y in points))
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[Point] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[Point] = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def sweep_convex(poly: Polygon2D, displacement: Point) -> Polygon2D:
    """Exact region covered by a convex polygon translated along a segment."""
    if not poly.is_convex():
        raise NonConvexSweep("sweep requires a convex polygon")
    dx, dy = displacement
    moved = [(x + dx, y + dy) for x, y in poly.vertices]
    return Polygon2D(tuple(convex_hull(list(poly.vertices) + moved)))


def _check_polygon(verts: np.ndarray) -> None:
    if len(verts) < 3 or abs(_signed_area(verts)) <= _AREA_EPS:
        raise DegeneratePolygon(f"polygon with {len(verts)} vertices has zero area")


def convex_row_spans(verts: np.ndarray, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row covered pixel columns of a batch of convex polygons.

    ``verts`` has shape (P, V, 2) with positively oriented vertices; shorter
    polygons may be padded by repeating a vertex. Returns float arrays
    ``(start, end)`` of shape (P, height): pixel i of row j is inside polygon
    p iff start[p, j] <= i <= end[p, j] (empty when start > end).

    A convex polygon is the intersection of its edge half-planes, so on a
    row's center line the covered x-range is bounded below by the rising
    edges' lines and above by the falling edges' lines.
    """
    verts = np.asarray(verts, dtype=float)
    x0, y0 = verts[..., 0], verts[..., 1]
    x1 = np.concatenate([x0[:, 1:], x0[:, :1]], axis=1)
    y1 = np.concatenate([y0[:, 1:], y0[:, :1]], axis=1)
    dy = y1 - y0
    rows = (np.arange(height, dtype=float) + 0.5)[None, :, None]
    slope = (x1 - x0) / np.where(dy == 0, 1.0, dy)
    xc = x0[:, None, :] + (rows - y0[:, None, :]) * slope[:, None, :]
    lo = np.where((dy < 0)[:, None, :], xc, -np.inf).max(axis=2)
    hi = np.where((dy > 0)[:, None, :], xc, np.inf).min(axis=2)
    yc = rows[..., 0]
    outside = (yc < y0.min(axis=1)[:, None]) | (yc > y0.max(axis=1)[:, None])
    lo[outside] = np.inf
    # pixel i is inside iff lo <= i + 0.5 <= hi
    return np.ceil(lo - 0.5), np.floor(hi - 0.5)


_ONES = np.array([(1 << n) - 1 for n in range(65)], dtype=np.uint64)


def spans_to_words(start: np.ndarray, end: np.ndarray, width: int) -> np.ndarray:
    """Turn (..., H) inclusive column spans into (..., H, ceil(width/64)) uint64 row words."""
    s = np.clip(start, 0, width).astype(np.int64)
    e = np.clip(end + 1, 0, width).astype(np.int64)
    n_words = (width + 63) // 64
    words = np.empty(start.shape + (n_words,), dtype=np.uint64)
    for k in range(n_words):
        lo = np.clip(s - 64 * k, 0, 64)
        hi = np.clip(e - 64 * k, 0, 64)
        words[..., k] = _ONES[hi] & ~_ONES[lo]
    return words


def words_to_array(words: np.ndarray, width: int) -> np.ndarray:
    """Inverse of the row-word layout: (..., H, n_words) uint64 -> (..., H, width) bool."""
    raw = np.ascontiguousarray(words.astype("<u8")).view(np.uint8)
    bits = np.unpackbits(raw, axis=-1, bitorder="little")
    return bits[..., :width].astype(bool)


def fill_convex_batch(verts: np.ndarray, height: int, width: int) -> np.ndarray:
    """Rasterize a batch of convex polygons; returns a (P, height, width) bool array."""
    start, end = convex_row_spans(verts, height)
    return words_to_array(spans_to_words(start, end, width), width)


def _fill_convex(arr: np.ndarray, verts: np.ndarray) -> None:
    h, w = arr.shape
    arr |= fill_convex_batch(verts[None], h, w)[0]


def _on_segment_centers(verts: np.ndarray, row_y: float, w: int) -> list[int]:
    """Pixel columns whose centers on this row lie exactly on an edge."""
    out = []
    n = len(verts)
    for k in range(n):
        (ax, ay), (bx, by) = verts[k], verts[(k + 1) % n]
        if min(ay, by) <= row_y <= max(ay, by):
            if ay == by:
                lo, hi = min(ax, bx), max(ax, bx)
            else:
                lo = hi = ax + (row_y - ay) * (bx - ax) / (by - ay)
            for i in range(max(0, math.ceil(lo - 0.5)), min(w - 1, math.floor(hi - 0.5)) + 1):
                out.append(i)
    return out


def _fill_simple(arr: np.ndarray, verts: np.ndarray) -> None:
    """Even-odd scanline fill for a simple (possibly non-convex) polygon."""
    h, w = arr.shape
    j0 = max(0, math.ceil(verts[:, 1].min() - 0.5))
    j1 = min(h - 1, math.floor(verts[:, 1].max() - 0.5))
    n = len(verts)
    for j in range(j0, j1 + 1):
        yc = j + 0.5
        xs = []
        for k in range(n):
            (ax, ay), (bx, by) = verts[k], verts[(k + 1) % n]
            if (ay <= yc < by) or (by <= yc < ay):
                xs.append(ax + (yc - ay) * (bx - ax) / (by - ay))
        xs.sort()
        for a, b in zip(xs[0::2], xs[1::2]):
            i0 = max(0, math.ceil(a - 0.5))
            i1 = min(w - 1, math.floor(b - 0.5))
            if i1 >= i0:
                arr[j, i0: i1 + 1] = True
        for i in _on_segment_centers(verts, yc, w):
            arr[j, i] = True


def fill_polygon(arr: np.ndarray, poly: Polygon2D) -> None:
    """Rasterize ``poly`` into a (height, width) bool array in place (OR)."""
    verts = poly.as_array()
    _check_polygon(verts)
    if poly.is_convex():
        _fill_convex(arr, verts)
    else:
        _fill_simple(arr, verts)


def rasterize_polygon(poly: Polygon2D, width: int, height: int) -> BinaryRaster:
    """Set every pixel whose center lies inside ``poly`` (boundary inclusive).

    Geometry outside the raster is clipped silently.
    """
    if width < 1 or height < 1:
        raise ValueError("raster dimensions must be >= 1")
    arr = np.zeros((height, width), dtype=bool)
    fill_polygon(arr, poly)
    return BinaryRaster.from_array(arr)


def distance_to_boundary_map(r: BinaryRaster) -> np.ndarray:
    """Euclidean distance from each set pixel to the nearest unset pixel.

    Pixels beyond the raster border count as unset, so a lone set pixel or
    a set pixel on the border has distance 1. Unset pixels map to 0.
    """
    arr = r.to_array()
    if not arr.any():
        return np.zeros(arr.shape, dtype=float)
    padded = np.pad(arr, 1, constant_values=False)
    return ndimage.distance_transform_edt(padded)[1:-1, 1:-1]


# --------------------------------------------------------------------------
# PGM I/O


def write_pgm(raster: BinaryRaster, target: str | Path | BinaryIO) -> None:
    """Write a binary P5 PGM with 255 for set pixels and 0 otherwise."""
    data = raster.to_array().astype(np.uint8) * 255
    payload = f"P5\n{raster.width} {raster.height}\n255\n".encode("ascii") + data.tobytes()
    if isinstance(target, (str, Path)):
        Path(target).write_bytes(payload)
    else:
        target.write(payload)


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos: pos + 1].isspace():
            pos += 1
        if buf[pos: pos + 1] == b"#":
            while pos < len(buf) and buf[pos: pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos: pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InputError("truncated PGM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_pgm_array(source: str | Path | bytes) -> np.ndarray:
    """Read a binary (P5) PGM as a uint8/uint16 array of shape (height, width)."""
    buf = source if isinstance(source, bytes) else Path(source).read_bytes()
    try:
        (magic, w, h, maxval), offset = _pgm_tokens(buf, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ValueError, IndexError) as exc:
        raise InputError(f"bad PGM header: {exc}") from exc
    if magic != b"P5":
        raise InputError(f"unsupported PGM magic {magic!r}")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = w * h * np.dtype(dtype).itemsize
    body = buf[offset: offset + n]
    if len(body) != n:
        raise InputError("truncated PGM body")
    return np.frombuffer(body, dtype=dtype).reshape(h, w).astype(np.uint16 if maxval >= 256 else np.uint8)


def read_pgm(source: str | Path | bytes) -> BinaryRaster:
    """Read a PGM mask; pixels at or above half of maxval are set."""
    buf = source if isinstance(source, bytes) else Path(source).read_bytes()
    arr = read_pgm_array(buf)
    (_, _, _, maxval), _ = _pgm_tokens(buf, 4)
    return BinaryRaster.from_array(arr >= (int(maxval) + 1) // 2)
