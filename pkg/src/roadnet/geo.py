"""Web Mercator tile math and pixel-space polyline kernels.

Tiles follow the XYZ ("slippy map") scheme: tile (x, y) at zoom z covers
1/2**z of the Mercator plane on each axis, origin at the north-west corner.
Pixel coordinates are tile-local, top-left origin, y pointing down.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

MAX_LAT = 85.05112878
TILE_SIZE = 1280
MAX_ZOOM = 22
PIXEL_MAX = TILE_SIZE - 1

Point = tuple[float, float]
PixelPolyline = tuple[tuple[int, int], ...]


@dataclass(frozen=True, order=True)
class TileId:
    zoom: int
    x: int
    y: int

    def __post_init__(self):
        if not 0 <= self.zoom <= MAX_ZOOM:
            raise ValueError(f"zoom {self.zoom} outside [0, {MAX_ZOOM}]")
        n = 1 << self.zoom
        if not (0 <= self.x < n and 0 <= self.y < n):
            raise ValueError(f"tile ({self.x}, {self.y}) outside the zoom-{self.zoom} grid")

    @property
    def image_id(self) -> str:
        return f"{self.x}_{self.y}"

    @classmethod
    def from_image_id(cls, image_id: str, zoom: int) -> "TileId":
        x, y = image_id.split("_")
        return cls(zoom, int(x), int(y))


@dataclass(frozen=True)
class TileRect:
    """Axis-aligned clipping window in tile-local pixel space (closed)."""

    min_x: float = 0.0
    min_y: float = 0.0
    max_x: float = float(TILE_SIZE)
    max_y: float = float(TILE_SIZE)

    def __post_init__(self):
        if not (self.min_x < self.max_x and self.min_y < self.max_y):
            raise ValueError("degenerate rectangle")

    def contains(self, p: Point) -> bool:
        return self.min_x <= p[0] <= self.max_x and self.min_y <= p[1] <= self.max_y


def check_geo_point(lon: float, lat: float) -> None:
    if not (math.isfinite(lon) and math.isfinite(lat)):
        raise ValueError("non-finite coordinate")
    if not -180.0 <= lon <= 180.0:
        raise ValueError(f"longitude {lon} outside [-180, 180]")
    if not -MAX_LAT <= lat <= MAX_LAT:
        raise ValueError(f"latitude {lat} outside the Web Mercator band")


def _mercator_x(lon: float) -> float:
    return (lon + 180.0) / 360.0


def _mercator_y(lat: float) -> float:
    phi = math.radians(lat)
    return (1.0 - math.log(math.tan(phi) + 1.0 / math.cos(phi)) / math.pi) / 2.0


def _lon_from_mercator(mx: float) -> float:
    return mx * 360.0 - 180.0


def _lat_from_mercator(my: float) -> float:
    return math.degrees(math.atan(math.sinh(math.pi * (1.0 - 2.0 * my))))


def lonlat_to_tile(lon: float, lat: float, zoom: int) -> TileId:
    """Return the tile at ``zoom`` whose footprint contains (lon, lat)."""
    check_geo_point(lon, lat)
    if not 0 <= zoom <= MAX_ZOOM:
        raise ValueError(f"zoom {zoom} outside [0, {MAX_ZOOM}]")
    n = 1 << zoom
    x = math.floor(_mercator_x(lon) * n)
    y = math.floor(_mercator_y(lat) * n)
    return TileId(zoom, min(max(x, 0), n - 1), min(max(y, 0), n - 1))


def tile_geo_bounds(tile: TileId) -> tuple[Point, Point]:
    """(north-west, south-east) corners of ``tile`` as (lon, lat) pairs."""
    n = 1 << tile.zoom
    nw = (_lon_from_mercator(tile.x / n), _lat_from_mercator(tile.y / n))
    se = (_lon_from_mercator((tile.x + 1) / n), _lat_from_mercator((tile.y + 1) / n))
    return nw, se


def geo_to_pixel(lon: float, lat: float, tile: TileId, tile_size: int = TILE_SIZE) -> Point:
    """Continuous, unrounded tile-local pixel position of a geographic point."""
    n = 1 << tile.zoom
    fx = (_mercator_x(lon) * n - tile.x) * tile_size
    fy = (_mercator_y(lat) * n - tile.y) * tile_size
    return fx, fy


def pixel_to_geo(fx: float, fy: float, tile: TileId, tile_size: int = TILE_SIZE) -> Point:
    n = 1 << tile.zoom
    lon = _lon_from_mercator((fx / tile_size + tile.x) / n)
    lat = _lat_from_mercator((fy / tile_size + tile.y) / n)
    return lon, lat


def world_pixel(lon: float, lat: float, zoom: int, tile_size: int = TILE_SIZE) -> Point:
    """Pixel position in the global zoom-level raster (used for tile lookups)."""
    scale = (1 << zoom) * tile_size
    return _mercator_x(lon) * scale, _mercator_y(lat) * scale


def tiles_for_bbox(min_lon: float, min_lat: float, max_lon: float, max_lat: float,
                   zoom: int) -> list[TileId]:
    """All tiles at ``zoom`` intersecting a lon/lat bounding box, row-major."""
    nw = lonlat_to_tile(min_lon, max_lat, zoom)
    se = lonlat_to_tile(max_lon, min_lat, zoom)
    return [TileId(zoom, x, y)
            for y in range(nw.y, se.y + 1)
            for x in range(nw.x, se.x + 1)]


# --- polyline kernels -------------------------------------------------------

def _liang_barsky(p0: Point, p1: Point, rect: TileRect) -> Optional[tuple[float, float]]:
    dx = p1[0] - p0[0]
    dy = p1[1] - p0[1]
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, p0[0] - rect.min_x), (dx, rect.max_x - p0[0]),
                 (-dy, p0[1] - rect.min_y), (dy, rect.max_y - p0[1])):
        if p == 0.0:
            if q < 0.0:
                return None
            continue
        r = q / p
        if p < 0.0:
            if r > t1:
                return None
            t0 = max(t0, r)
        else:
            if r < t0:
                return None
            t1 = min(t1, r)
    return t0, t1


def _lerp(p0: Point, p1: Point, t: float) -> Point:
    if t == 0.0:
        return p0
    if t == 1.0:
        return p1
    return (p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1]))


def _clamp_to_rect(p: Point, rect: TileRect) -> Point:
    return (min(max(p[0], rect.min_x), rect.max_x), min(max(p[1], rect.min_y), rect.max_y))


def clip_polyline(line: Sequence[Point], rect: TileRect = TileRect()) -> list[list[Point]]:
    """Split ``line`` into the maximal connected runs lying inside ``rect``.

    Each segment is clipped with Liang-Barsky; consecutive clipped segments
    that share an inside vertex are chained into one piece. Pieces with fewer
    than two distinct vertices are dropped.
    """
    if len(line) < 2:
        raise ValueError("a polyline needs at least two vertices")
    pieces: list[list[Point]] = []
    current: list[Point] = []
    for a, b in zip(line, line[1:]):
        a = (float(a[0]), float(a[1]))
        b = (float(b[0]), float(b[1]))
        span = _liang_barsky(a, b, rect)
        if span is None:
            if current:
                pieces.append(current)
                current = []
            continue
        t0, t1 = span
        start = _clamp_to_rect(_lerp(a, b, t0), rect)
        end = _clamp_to_rect(_lerp(a, b, t1), rect)
        if current and t0 == 0.0:
            current.append(end)
        else:
            if current:
                pieces.append(current)
            current = [start, end]
        if t1 < 1.0:
            pieces.append(current)
            current = []
    if current:
        pieces.append(current)

    out = []
    for piece in pieces:
        deduped = [piece[0]]
        for p in piece[1:]:
            if p != deduped[-1]:
                deduped.append(p)
        if len(deduped) >= 2:
            out.append(deduped)
    return out


def point_segment_distance(p: Point, a: Point, b: Point) -> float:
    dx = b[0] - a[0]
    dy = b[1] - a[1]
    len_sq = dx * dx + dy * dy
    if len_sq == 0.0:
        return math.hypot(p[0] - a[0], p[1] - a[1])
    t = ((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len_sq
    t = min(1.0, max(0.0, t))
    return math.hypot(p[0] - (a[0] + t * dx), p[1] - (a[1] + t * dy))


def simplify_polyline(line: Sequence[Point], epsilon_px: float = 2.0) -> list[Point]:
    """Douglas-Peucker simplification; endpoints are always kept."""
    if len(line) < 2:
        raise ValueError("a polyline needs at least two vertices")
    if epsilon_px < 0:
        raise ValueError("epsilon must be non-negative")
    n = len(line)
    keep = [False] * n
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        lo, hi = stack.pop()
        best, best_i = -1.0, -1
        for i in range(lo + 1, hi):
            d = point_segment_distance(line[i], line[lo], line[hi])
            if d > best:
                best, best_i = d, i
        if best_i >= 0 and best > epsilon_px:
            keep[best_i] = True
            stack.append((lo, best_i))
            stack.append((best_i, hi))
    return [tuple(line[i]) for i in range(n) if keep[i]]


def _round_half_away(v: float) -> int:
    r = math.floor(abs(v) + 0.5)
    return int(r if v >= 0 else -r)


def polyline_arc_length(line: Iterable[Sequence[float]]) -> float:
    pts = list(line)
    return sum(math.hypot(b[0] - a[0], b[1] - a[1]) for a, b in zip(pts, pts[1:]))


def quantize_polyline(line: Sequence[Point], min_road_px: float = 8.0) -> Optional[PixelPolyline]:
    """Round to integer pixels, clamp to the tile, drop repeats.

    Returns None when fewer than two vertices survive or the result is
    shorter than ``min_road_px``.
    """
    out: list[tuple[int, int]] = []
    for x, y in line:
        q = (min(max(_round_half_away(x), 0), PIXEL_MAX),
             min(max(_round_half_away(y), 0), PIXEL_MAX))
        if not out or out[-1] != q:
            out.append(q)
    if len(out) < 2 or polyline_arc_length(out) < min_road_px:
        return None
    return tuple(out)


def check_pixel_polyline(line: Sequence[Sequence[int]]) -> None:
    """Raise ValueError unless ``line`` is a well-formed pixel polyline."""
    if len(line) < 2:
        raise ValueError("road has fewer than two vertices")
    for p in line:
        if len(p) != 2 or not all(isinstance(v, int) and not isinstance(v, bool) for v in p):
            raise ValueError(f"vertex {p!r} is not an integer pair")
        if not (0 <= p[0] <= PIXEL_MAX and 0 <= p[1] <= PIXEL_MAX):
            raise ValueError(f"vertex {tuple(p)} outside [0, {PIXEL_MAX}]")
    for a, b in zip(line, line[1:]):
        if tuple(a) == tuple(b):
            raise ValueError(f"repeated consecutive vertex {tuple(a)}")
