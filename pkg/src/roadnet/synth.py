"""Synthetic road worlds, a raster renderer and a RANSAC baseline detector.

Scenes are drawn on a stride-2 tile lattice so a road that overshoots its
own tile can never reach another scene tile; negative tiles stay negative
when the whole world is joined against the tile set.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from roadnet.caption import Caption, NoRoads, Roads
from roadnet.dataset import BuildConfig, BuiltDataset, assemble_dataset, order_roads
from roadnet.geo import (
    TILE_SIZE,
    Point,
    TileId,
    TileRect,
    clip_polyline,
    geo_to_pixel,
    lonlat_to_tile,
    pixel_to_geo,
    quantize_polyline,
)

# lon/lat box: Western Europe
DEFAULT_REGION = (-10.0, 36.0, 20.0, 60.0)

RGB_LUMA = np.array([0.299, 0.587, 0.114])


class DegenerateRegion(ValueError):
    pass


@dataclass(frozen=True)
class SynthScene:
    tile: TileId
    roads_geo: tuple[tuple[Point, ...], ...]
    terrain_seed: int


@dataclass(frozen=True)
class WorldConfig:
    negative_fraction: float = 0.40
    zoom: int = 16
    region: tuple[float, float, float, float] = DEFAULT_REGION
    min_roads: int = 1
    max_roads: int = 4
    min_vertices: int = 2
    max_vertices: int = 6
    # lateral vertex jitter as a fraction of chord length; 0 keeps roads straight
    curvature: float = 0.0
    min_angle_deg: float = 25.0
    overshoot_px: tuple[float, float] = (16.0, 128.0)
    tile_size: int = TILE_SIZE


@dataclass(frozen=True)
class RenderStyle:
    road_width_px: int = 9
    road_rgb: tuple[int, int, int] = (200, 200, 196)
    ground_dark_rgb: tuple[int, int, int] = (58, 88, 40)
    ground_light_rgb: tuple[int, int, int] = (112, 86, 56)
    noise_cell_px: int = 160
    # per-pixel jitter in palette units
    grain: float = 0.12
    max_ground_luminance: float = 120.0


@dataclass(frozen=True)
class DetectParams:
    lum_threshold: float = 160.0
    band_px: float = 6.0
    max_roads: int = 4
    min_inliers: int = 400
    seed: int = 0
    iterations: int = 200
    min_pair_px: float = 30.0
    max_gap_px: float = 64.0
    refine_steps: int = 3
    min_road_px: float = 8.0


# --- world generation -------------------------------------------------------

def _angle_gap(a: float, b: float) -> float:
    d = abs(a - b) % math.pi
    return min(d, math.pi - d)


def _chord_roads(rng: np.random.Generator, n_roads: int, cfg: WorldConfig) -> list[list[Point]]:
    """Straight chords through the central half of the tile, in pixel space."""
    size = float(cfg.tile_size)
    min_sep = math.radians(cfg.min_angle_deg)
    angles: list[float] = []
    roads = []
    for _ in range(n_roads):
        theta = float(rng.uniform(0.0, math.pi))
        for _attempt in range(100):
            if all(_angle_gap(theta, a) >= min_sep for a in angles):
                break
            theta = float(rng.uniform(0.0, math.pi))
        angles.append(theta)
        ax, ay = rng.uniform(0.25 * size, 0.75 * size, size=2)
        n_vert = int(rng.integers(cfg.min_vertices, cfg.max_vertices + 1))
        over = rng.uniform(cfg.overshoot_px[0], cfg.overshoot_px[1], size=2)
        params = np.sort(rng.uniform(0.0, 1.0, size=n_vert - 2))
        jitter = rng.normal(size=n_vert - 2)

        dx, dy = math.cos(theta), math.sin(theta)
        # distance from the anchor to the tile edge, forward and backward
        fwd, back = [], []
        for c, d in ((ax, dx), (ay, dy)):
            if abs(d) > 1e-12:
                t_lo, t_hi = (0.0 - c) / d, (size - c) / d
                fwd.append(max(t_lo, t_hi))
                back.append(-min(t_lo, t_hi))
        t_fwd = min(fwd) + over[0]
        t_back = min(back) + over[1]
        start = (ax - t_back * dx, ay - t_back * dy)
        end = (ax + t_fwd * dx, ay + t_fwd * dy)
        length = t_fwd + t_back
        pts = [start]
        for t, j in zip(params, jitter):
            off = j * cfg.curvature * length
            pts.append((start[0] + t * (end[0] - start[0]) - off * dy,
                        start[1] + t * (end[1] - start[1]) + off * dx))
        pts.append(end)
        roads.append(pts)
    return roads


def _scene(rng: np.random.Generator, tile: TileId, positive: bool, cfg: WorldConfig) -> SynthScene:
    roads_geo = []
    if positive:
        n_roads = int(rng.integers(cfg.min_roads, cfg.max_roads + 1))
        for road in _chord_roads(rng, n_roads, cfg):
            roads_geo.append(tuple(pixel_to_geo(x, y, tile, cfg.tile_size) for x, y in road))
    terrain_seed = int(rng.integers(0, 2**63 - 1))
    return SynthScene(tile, tuple(roads_geo), terrain_seed)


def generate_world(seed: int, n_tiles: int, negative_fraction: float = 0.40, zoom: int = 16,
                   region: Sequence[float] = DEFAULT_REGION,
                   config: Optional[WorldConfig] = None) -> list[SynthScene]:
    """Sample ``n_tiles`` scenes, exactly round(n_tiles * negative_fraction) empty."""
    if n_tiles < 1:
        raise ValueError("n_tiles must be at least 1")
    if not 0.0 <= negative_fraction <= 1.0:
        raise ValueError("negative_fraction must lie in [0, 1]")
    cfg = config or WorldConfig()
    cfg = replace(cfg, negative_fraction=negative_fraction, zoom=zoom, region=tuple(region))
    min_lon, min_lat, max_lon, max_lat = region
    if not (min_lon < max_lon and min_lat < max_lat):
        raise DegenerateRegion(f"empty region {tuple(region)}")
    nw = lonlat_to_tile(min_lon, max_lat, zoom)
    se = lonlat_to_tile(max_lon, min_lat, zoom)
    x0, y0 = nw.x + (nw.x % 2), nw.y + (nw.y % 2)
    nx = (se.x - x0) // 2 + 1
    ny = (se.y - y0) // 2 + 1
    if nx < 1 or ny < 1 or nx * ny < n_tiles:
        raise DegenerateRegion(f"region holds {max(nx, 0) * max(ny, 0)} lattice tiles, "
                               f"{n_tiles} requested")

    rng = np.random.default_rng(seed)
    seen: set[int] = set()
    cells: list[int] = []
    while len(cells) < n_tiles:
        for c in rng.integers(0, nx * ny, size=n_tiles - len(cells)).tolist():
            if c not in seen and len(cells) < n_tiles:
                seen.add(c)
                cells.append(c)
    tiles = [TileId(zoom, x0 + 2 * (c % nx), y0 + 2 * (c // nx)) for c in cells]

    n_neg = int(math.floor(n_tiles * negative_fraction + 0.5))
    negative = set(rng.permutation(n_tiles)[:n_neg].tolist())
    return [_scene(rng, t, i not in negative, cfg) for i, t in enumerate(tiles)]


def scene_for_tile(world_seed: int, tile: TileId, config: Optional[WorldConfig] = None
                   ) -> SynthScene:
    """Deterministic scene for an arbitrary tile; used by on-demand tile serving."""
    cfg = config or WorldConfig()
    rng = np.random.default_rng([world_seed, tile.zoom, tile.x, tile.y])
    positive = bool(rng.random() >= cfg.negative_fraction)
    return _scene(rng, tile, positive, cfg)


def world_roads(scenes: Sequence[SynthScene]) -> list[tuple[Point, ...]]:
    return [road for s in scenes for road in s.roads_geo]


# --- rendering --------------------------------------------------------------

def _interp_weights(size: int, cell: int, g: int) -> np.ndarray:
    coords = (np.arange(size) + 0.5) / cell
    i0 = np.floor(coords).astype(int)
    f = coords - i0
    f = f * f * (3.0 - 2.0 * f)
    w = np.zeros((size, g), dtype=np.float32)
    rows = np.arange(size)
    w[rows, i0] = 1.0 - f
    w[rows, i0 + 1] = f
    return w


def _value_noise(rng: np.random.Generator, size: int, cell: int) -> np.ndarray:
    """Smooth lattice noise in [0, 1]; separable so it costs two small matmuls."""
    g = size // cell + 2
    lattice = rng.random((g, g), dtype=np.float32)
    w = _interp_weights(size, cell, g)
    return w @ lattice @ w.T


def luminance(img: np.ndarray) -> np.ndarray:
    return img[..., :3].astype(np.float64) @ RGB_LUMA


def render_tile(scene: SynthScene, style: RenderStyle = RenderStyle(),
                tile_size: int = TILE_SIZE) -> np.ndarray:
    """Render a scene as a (tile_size, tile_size, 3) uint8 RGB array."""
    rng = np.random.default_rng(scene.terrain_seed)
    t = 0.7 * _value_noise(rng, tile_size, style.noise_cell_px)
    t += 0.3 * _value_noise(rng, tile_size, max(style.noise_cell_px // 4, 1))
    t += (rng.random((tile_size, tile_size), dtype=np.float32) - 0.5) * (2.0 * style.grain)
    np.clip(t, 0.0, 1.0, out=t)
    dark = np.array(style.ground_dark_rgb, dtype=np.float32)
    light = np.array(style.ground_light_rgb, dtype=np.float32)
    ground = dark + t[..., None] * (light - dark)
    # ground colours are convex blends of the palette, so this bounds every pixel
    peak = float((np.stack([dark, light]) @ RGB_LUMA).max())
    if peak > style.max_ground_luminance:
        ground *= style.max_ground_luminance / peak
    img = Image.fromarray(ground.astype(np.uint8), "RGB")

    draw = ImageDraw.Draw(img)
    pad = float(style.road_width_px * 2)
    window = TileRect(-pad, -pad, tile_size + pad, tile_size + pad)
    for road in scene.roads_geo:
        px = [geo_to_pixel(lon, lat, scene.tile, tile_size) for lon, lat in road]
        for piece in clip_polyline(px, window):
            draw.line(piece, fill=tuple(style.road_rgb), width=style.road_width_px, joint="curve")
    return np.asarray(img, dtype=np.uint8).copy()


def encode_png(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(img, "RGB").save(buf, format="PNG", compress_level=1)
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        if im.format != "PNG":
            raise ValueError(f"expected PNG, got {im.format}")
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def load_png(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_png(f.read())


# --- baseline detector ------------------------------------------------------

@dataclass
class _LineFit:
    point: np.ndarray
    direction: np.ndarray
    inliers: np.ndarray = field(repr=False)


def _best_hypothesis(pts: np.ndarray, rng: np.random.Generator, p: DetectParams):
    n = len(pts)
    i = rng.integers(0, n, size=p.iterations)
    j = rng.integers(0, n, size=p.iterations)
    d = pts[j] - pts[i]
    norm = np.hypot(d[:, 0], d[:, 1])
    ok = norm >= p.min_pair_px
    if not ok.any():
        return None
    i, d, norm = i[ok], d[ok], norm[ok]
    normals = np.stack([-d[:, 1], d[:, 0]], axis=1) / norm[:, None]
    offsets = np.einsum("ij,ij->i", pts[i], normals)
    best_count, best_k = -1, -1
    for lo in range(0, len(normals), 32):
        dist = np.abs(pts @ normals[lo:lo + 32].T - offsets[lo:lo + 32])
        counts = (dist <= p.band_px).sum(axis=0)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best_k = int(counts[k]), lo + k
    return normals[best_k], offsets[best_k]


def _fit_line(pts: np.ndarray, rng: np.random.Generator, p: DetectParams) -> Optional[_LineFit]:
    hyp = _best_hypothesis(pts, rng, p)
    if hyp is None:
        return None
    normal, offset = hyp
    inliers = np.abs(pts @ normal - offset) <= p.band_px
    centroid = pts[inliers].mean(axis=0)
    direction = np.array([normal[1], -normal[0]])
    for _ in range(p.refine_steps):
        sel = pts[inliers]
        if len(sel) < 2:
            break
        centroid = sel.mean(axis=0)
        cov = np.cov((sel - centroid).T)
        _, vecs = np.linalg.eigh(cov)
        direction = vecs[:, 1]
        normal = np.array([-direction[1], direction[0]])
        inliers = np.abs((pts - centroid) @ normal) <= p.band_px
    return _LineFit(centroid, direction, inliers)


def _longest_run(t: np.ndarray, max_gap: float) -> tuple[float, float, np.ndarray]:
    """Densest gap-free run of projections; returns (t_min, t_max, member mask)."""
    order = np.argsort(t)
    ts = t[order]
    breaks = np.nonzero(np.diff(ts) > max_gap)[0]
    starts = np.concatenate([[0], breaks + 1])
    ends = np.concatenate([breaks + 1, [len(ts)]])
    k = int(np.argmax(ends - starts))
    mask = np.zeros(len(t), dtype=bool)
    mask[order[starts[k]:ends[k]]] = True
    return float(ts[starts[k]]), float(ts[ends[k] - 1]), mask


def baseline_detect(img: np.ndarray, params: DetectParams = DetectParams()) -> Caption:
    """Detect straight roads by iterated RANSAC on bright pixels."""
    if img.ndim != 3 or img.shape[2] < 3:
        raise ValueError("expected an RGB image")
    h, w = img.shape[:2]
    ys, xs = np.nonzero(luminance(img) >= params.lum_threshold)
    pts = np.column_stack([xs, ys]).astype(np.float64)
    rng = np.random.default_rng(params.seed)
    rect = TileRect(0.0, 0.0, float(w - 1), float(h - 1))
    roads = []
    attempts = 0
    while len(roads) < params.max_roads and len(pts) >= params.min_inliers:
        attempts += 1
        if attempts > 4 * params.max_roads:
            break
        fit = _fit_line(pts, rng, params)
        if fit is None or fit.inliers.sum() < params.min_inliers:
            break
        idx = np.nonzero(fit.inliers)[0]
        t = (pts[idx] - fit.point) @ fit.direction
        t0, t1, run = _longest_run(t, params.max_gap_px)
        members = idx[run]
        pts = np.delete(pts, members, axis=0)
        if len(members) < params.min_inliers:
            continue
        a = fit.point + t0 * fit.direction
        b = fit.point + t1 * fit.direction
        pieces = clip_polyline([tuple(a), tuple(b)], rect)
        if not pieces:
            continue
        q = quantize_polyline(pieces[0], params.min_road_px)
        if q is not None:
            roads.append(q)
    return Roads(order_roads(roads)) if roads else NoRoads()


def build_synthetic_dataset(scenes: Sequence[SynthScene], schema: str = "coordinates",
                            config: Optional[BuildConfig] = None,
                            negative_fraction: Optional[float] = 0.40,
                            test_size: int = 100, seed: int = 0) -> BuiltDataset:
    """Join a synthetic world against its own tiles and split it."""
    return assemble_dataset(world_roads(scenes), [s.tile for s in scenes], schema,
                            config or BuildConfig(), negative_fraction, test_size, seed)
