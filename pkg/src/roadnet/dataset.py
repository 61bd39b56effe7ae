"""Build, balance, split, write and validate image-instruction datasets.

On-disk layout of a dataset directory::

    pairs.json         [{"image_id": "x_y", "caption": "..."}]   (all pairs)
    train.json         same shape, training subset
    test.json          same shape, held-out subset
    ground_truth.json  [{"image_id", "zoom", "x", "y", "roads": [[[x, y], ...]]}]
    manifest.json      counts, split sizes, seed, toolkit version
"""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from roadnet import __version__
from roadnet.caption import (
    CaptionError,
    NoRoads,
    PresenceFound,
    caption_for_roads,
    parse_caption,
    serialize_caption,
)
from roadnet.geo import (
    TILE_SIZE,
    PixelPolyline,
    Point,
    TileId,
    TileRect,
    check_geo_point,
    check_pixel_polyline,
    clip_polyline,
    geo_to_pixel,
    polyline_arc_length,
    quantize_polyline,
    simplify_polyline,
    world_pixel,
)

log = logging.getLogger(__name__)

IMAGE_ID_RE = re.compile(r"^\d+_\d+$")
SCHEMAS = ("presence", "coordinates")

PAIRS_FILE = "pairs.json"
TRAIN_FILE = "train.json"
TEST_FILE = "test.json"
GT_FILE = "ground_truth.json"
MANIFEST_FILE = "manifest.json"


class DatasetError(Exception):
    pass


class MixedZoom(DatasetError):
    pass


class EmptyInput(DatasetError):
    pass


class Unachievable(DatasetError):
    def __init__(self, fraction: float):
        super().__init__(f"negative fraction {fraction} cannot be reached by subsampling")
        self.fraction = fraction


class TestTooLarge(DatasetError):
    __test__ = False  # not a pytest class


class SchemaViolation(DatasetError):
    def __init__(self, index, reason: str, file: str = PAIRS_FILE, kind: str = "schema"):
        super().__init__(f"{file}[{index}]: {reason}")
        self.index = index
        self.reason = reason
        self.file = file
        self.kind = kind


@dataclass(frozen=True)
class InstructionPair:
    image_id: str
    caption: str

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "caption": self.caption}


@dataclass(frozen=True)
class GroundTruthRecord:
    image_id: str
    tile: TileId
    roads: tuple[PixelPolyline, ...] = ()

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "zoom": self.tile.zoom,
            "x": self.tile.x,
            "y": self.tile.y,
            "roads": [[list(p) for p in road] for road in self.roads],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruthRecord":
        tile = TileId(int(obj["zoom"]), int(obj["x"]), int(obj["y"]))
        roads = tuple(tuple((int(p[0]), int(p[1])) for p in road) for road in obj["roads"])
        return cls(obj["image_id"], tile, roads)


@dataclass
class DatasetManifest:
    zoom: int
    schema: str
    total: int
    positive: int
    negative: int
    train: int
    test: int
    seed: Optional[int] = None
    tile_size: int = TILE_SIZE
    version: str = __version__

    def to_json(self) -> dict:
        return {
            "zoom": self.zoom,
            "tile_size": self.tile_size,
            "schema": self.schema,
            "counts": {"total": self.total, "positive": self.positive, "negative": self.negative},
            "split": {"train": self.train, "test": self.test},
            "seed": self.seed,
            "version": self.version,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        return cls(
            zoom=int(obj["zoom"]),
            tile_size=int(obj.get("tile_size", TILE_SIZE)),
            schema=obj["schema"],
            total=int(obj["counts"]["total"]),
            positive=int(obj["counts"]["positive"]),
            negative=int(obj["counts"]["negative"]),
            train=int(obj["split"]["train"]),
            test=int(obj["split"]["test"]),
            seed=obj.get("seed"),
            version=obj.get("version", __version__),
        )


@dataclass(frozen=True)
class BuildConfig:
    epsilon_px: float = 2.0
    min_road_px: float = 8.0
    tile_size: int = TILE_SIZE


GeoLine = Sequence[Point]


def check_geo_line(line: GeoLine) -> None:
    if len(line) < 2:
        raise ValueError("a line string needs at least two vertices")
    for lon, lat in line:
        check_geo_point(lon, lat)
    for a, b in zip(line, line[1:]):
        if tuple(a) == tuple(b):
            raise ValueError("repeated consecutive vertex")


def load_roads_geojson(path) -> tuple[list[list[Point]], int]:
    """Read LineString features from a GeoJSON FeatureCollection.

    Returns (roads, skipped) where ``skipped`` counts non-LineString features.
    """
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("type") == "FeatureCollection":
        features = doc.get("features", [])
    elif doc.get("type") == "Feature":
        features = [doc]
    else:
        features = [{"type": "Feature", "geometry": doc}]
    roads, skipped = [], 0
    for feat in features:
        geom = feat.get("geometry") or {}
        if geom.get("type") != "LineString":
            skipped += 1
            continue
        coords = [(float(c[0]), float(c[1])) for c in geom["coordinates"]]
        deduped = [coords[0]] if coords else []
        for c in coords[1:]:
            if c != deduped[-1]:
                deduped.append(c)
        if len(deduped) < 2:
            skipped += 1
            continue
        roads.append(deduped)
    if skipped:
        log.warning("skipped %d non-LineString or degenerate features in %s", skipped, path)
    return roads, skipped


def roads_to_geojson(roads: Iterable[GeoLine]) -> dict:
    return {
        "type": "FeatureCollection",
        "features": [
            {"type": "Feature", "properties": {},
             "geometry": {"type": "LineString", "coordinates": [list(p) for p in road]}}
            for road in roads
        ],
    }


def road_sort_key(road: PixelPolyline):
    return (road[0][1], road[0][0], polyline_arc_length(road))


def order_roads(roads: Iterable[PixelPolyline]) -> tuple[PixelPolyline, ...]:
    return tuple(sorted(roads, key=road_sort_key))


def tile_roads(lines: Iterable[GeoLine], tile: TileId, config: BuildConfig = BuildConfig()
               ) -> tuple[PixelPolyline, ...]:
    """Project, clip, simplify and quantize road geometries for one tile."""
    rect = TileRect(0.0, 0.0, float(config.tile_size), float(config.tile_size))
    out = []
    for line in lines:
        px = [geo_to_pixel(lon, lat, tile, config.tile_size) for lon, lat in line]
        for piece in clip_polyline(px, rect):
            q = quantize_polyline(simplify_polyline(piece, config.epsilon_px), config.min_road_px)
            if q is not None:
                out.append(q)
    return order_roads(out)


def _caption(roads: Sequence[PixelPolyline], schema: str):
    if schema == "presence":
        return PresenceFound() if roads else NoRoads()
    return caption_for_roads(roads)


def build_pairs(roads: Sequence[GeoLine], tiles: Sequence[TileId], schema: str = "coordinates",
                config: BuildConfig = BuildConfig()
                ) -> tuple[list[InstructionPair], list[GroundTruthRecord]]:
    """Caption every tile with the roads that cross it.

    Output is sorted by image_id. Road-to-tile candidates are found through
    each road's bounding box in the global pixel raster, so cost scales with
    the number of overlaps rather than roads x tiles.
    """
    if schema not in SCHEMAS:
        raise ValueError(f"unknown schema {schema!r}")
    if not tiles:
        raise EmptyInput("no tiles given")
    zooms = {t.zoom for t in tiles}
    if len(zooms) > 1:
        raise MixedZoom(f"tiles span zooms {sorted(zooms)}")
    zoom = zooms.pop()
    tile_set = set(tiles)

    per_tile: dict[TileId, list[int]] = {t: [] for t in tile_set}
    for i, line in enumerate(roads):
        check_geo_line(line)
        wp = [world_pixel(lon, lat, zoom, config.tile_size) for lon, lat in line]
        xs = [p[0] for p in wp]
        ys = [p[1] for p in wp]
        n = 1 << zoom
        x0 = max(0, math.floor(min(xs) / config.tile_size))
        x1 = min(n - 1, math.floor(max(xs) / config.tile_size))
        y0 = max(0, math.floor(min(ys) / config.tile_size))
        y1 = min(n - 1, math.floor(max(ys) / config.tile_size))
        if (x1 - x0 + 1) * (y1 - y0 + 1) > len(tile_set):
            candidates = [t for t in tile_set if x0 <= t.x <= x1 and y0 <= t.y <= y1]
        else:
            candidates = [TileId(zoom, x, y) for x in range(x0, x1 + 1) for y in range(y0, y1 + 1)]
        for t in candidates:
            if t in per_tile:
                per_tile[t].append(i)

    pairs, gts = [], []
    for tile in sorted(tile_set, key=lambda t: t.image_id):
        found = tile_roads([roads[i] for i in per_tile[tile]], tile, config)
        gts.append(GroundTruthRecord(tile.image_id, tile, found))
        pairs.append(InstructionPair(tile.image_id, serialize_caption(_caption(found, schema))))
    if len({p.image_id for p in pairs}) != len(pairs):
        raise DatasetError("duplicate image_id among tiles")
    return pairs, gts


def balance_negatives(pairs: Sequence[InstructionPair], gts: Sequence[GroundTruthRecord],
                      target_negative_fraction: float = 0.40, seed: int = 0,
                      tolerance: float = 0.02
                      ) -> tuple[list[InstructionPair], list[GroundTruthRecord]]:
    """Subsample the over-represented class toward a target negative share.

    Already-balanced input (within ``tolerance``) is returned unchanged.
    """
    if not 0.0 <= target_negative_fraction < 1.0:
        raise ValueError("target fraction must lie in [0, 1)")
    if len(pairs) != len(gts):
        raise ValueError("pairs and ground truth differ in length")
    pos = [i for i, g in enumerate(gts) if g.roads]
    neg = [i for i, g in enumerate(gts) if not g.roads]
    total = len(gts)
    f = target_negative_fraction
    if total == 0:
        return list(pairs), list(gts)
    if (not pos or not neg) and f != 0.0:
        raise Unachievable(f)
    if abs(len(neg) / total - f) <= tolerance:
        return list(pairs), list(gts)

    rng = np.random.default_rng(seed)
    if len(neg) / total > f:
        keep_neg = int(math.floor(len(pos) * f / (1.0 - f) + 0.5))
        chosen = rng.choice(len(neg), size=keep_neg, replace=False)
        keep = set(pos) | {neg[i] for i in chosen.tolist()}
    else:
        keep_pos = int(math.floor(len(neg) * (1.0 - f) / f + 0.5))
        chosen = rng.choice(len(pos), size=keep_pos, replace=False)
        keep = set(neg) | {pos[i] for i in chosen.tolist()}
    idx = sorted(keep)
    return [pairs[i] for i in idx], [gts[i] for i in idx]


def split_dataset(pairs: Sequence[InstructionPair], gts: Sequence[GroundTruthRecord],
                  test_size: int = 100, seed: int = 0):
    """Draw a held-out test set uniformly without replacement.

    Returns ((train_pairs, train_gts), (test_pairs, test_gts)), each half
    sorted by image_id.
    """
    if test_size > len(pairs):
        raise TestTooLarge(f"test_size {test_size} exceeds {len(pairs)} pairs")
    if test_size < 0:
        raise ValueError("test_size must be non-negative")
    rng = np.random.default_rng(seed)
    test_idx = set(rng.choice(len(pairs), size=test_size, replace=False).tolist())

    def half(select):
        idx = sorted((i for i in range(len(pairs)) if select(i)), key=lambda i: pairs[i].image_id)
        return [pairs[i] for i in idx], [gts[i] for i in idx]

    return half(lambda i: i not in test_idx), half(lambda i: i in test_idx)


def make_manifest(gts: Sequence[GroundTruthRecord], zoom: int, schema: str, test_ids: Iterable[str],
                  seed: Optional[int] = None, tile_size: int = TILE_SIZE) -> DatasetManifest:
    positive = sum(1 for g in gts if g.roads)
    n_test = len(set(test_ids))
    return DatasetManifest(zoom=zoom, schema=schema, total=len(gts), positive=positive,
                           negative=len(gts) - positive, train=len(gts) - n_test, test=n_test,
                           seed=seed, tile_size=tile_size)


def _dump(obj, path: Path) -> None:
    text = json.dumps(obj, indent=2, ensure_ascii=False)
    path.write_text(text + "\n", encoding="utf-8")


def write_dataset(pairs: Sequence[InstructionPair], gts: Sequence[GroundTruthRecord],
                  manifest: DatasetManifest, out_dir, test_ids: Iterable[str] = ()) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    test_ids = set(test_ids)
    order = sorted(range(len(pairs)), key=lambda i: pairs[i].image_id)
    pairs = [pairs[i] for i in order]
    gts = [gts[i] for i in order]
    _dump([p.to_json() for p in pairs], out / PAIRS_FILE)
    _dump([p.to_json() for p in pairs if p.image_id not in test_ids], out / TRAIN_FILE)
    _dump([p.to_json() for p in pairs if p.image_id in test_ids], out / TEST_FILE)
    _dump([g.to_json() for g in gts], out / GT_FILE)
    _dump(manifest.to_json(), out / MANIFEST_FILE)
    return out


def write_pairs(pairs: Iterable[InstructionPair], path) -> None:
    _dump([p.to_json() for p in pairs], Path(path))


def read_pairs(path) -> list[InstructionPair]:
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, list):
        raise SchemaViolation("-", "top level must be a JSON array", file=Path(path).name)
    out = []
    for i, rec in enumerate(raw):
        if not isinstance(rec, dict) or set(rec) != {"image_id", "caption"}:
            raise SchemaViolation(i, "record must have exactly image_id and caption",
                                  file=Path(path).name)
        if not isinstance(rec["image_id"], str) or not isinstance(rec["caption"], str):
            raise SchemaViolation(i, "image_id and caption must be strings", file=Path(path).name)
        out.append(InstructionPair(rec["image_id"], rec["caption"]))
    return out


def read_ground_truth(path) -> list[GroundTruthRecord]:
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, list):
        raise SchemaViolation("-", "top level must be a JSON array", file=GT_FILE)
    out = []
    for i, rec in enumerate(raw):
        try:
            out.append(GroundTruthRecord.from_json(rec))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise SchemaViolation(i, f"bad ground-truth record: {exc}", file=GT_FILE) from exc
    return out


@dataclass
class Violation:
    file: str
    index: object
    kind: str
    reason: str

    def __str__(self):
        return f"{self.file}[{self.index}] {self.kind}: {self.reason}"


def _caption_kind(exc: CaptionError) -> str:
    return {"CountMismatch": "count_mismatch",
            "CoordinateOutOfRange": "coordinate_out_of_range"}.get(type(exc).__name__, "grammar")


def validate_dataset(ds_dir, min_road_px: float = 8.0) -> list[Violation]:
    """Check every dataset invariant; returns all violations found."""
    d = Path(ds_dir)
    out: list[Violation] = []

    def add(file, index, kind, reason):
        out.append(Violation(file, index, kind, reason))

    def load(name):
        try:
            with open(d / name, encoding="utf-8") as f:
                return json.load(f)
        except FileNotFoundError:
            add(name, "-", "missing_file", "file not found")
        except json.JSONDecodeError as exc:
            add(name, "-", "json", str(exc))
        return None

    raw_pairs = load(PAIRS_FILE)
    raw_gts = load(GT_FILE)
    raw_manifest = load(MANIFEST_FILE)

    manifest = None
    if raw_manifest is not None:
        try:
            manifest = DatasetManifest.from_json(raw_manifest)
        except (KeyError, TypeError, ValueError) as exc:
            add(MANIFEST_FILE, "-", "schema", f"bad manifest: {exc}")

    captions = {}
    ids_seen: dict[str, int] = {}
    if isinstance(raw_pairs, list):
        for i, rec in enumerate(raw_pairs):
            if not isinstance(rec, dict) or set(rec) != {"image_id", "caption"}:
                add(PAIRS_FILE, i, "schema", "record must have exactly image_id and caption")
                continue
            image_id, caption = rec["image_id"], rec["caption"]
            if not isinstance(image_id, str) or not IMAGE_ID_RE.match(image_id):
                add(PAIRS_FILE, i, "bad_id", f"image_id {image_id!r} is not '<x>_<y>'")
            elif image_id in ids_seen:
                add(PAIRS_FILE, i, "duplicate_id",
                    f"image_id {image_id} already used at index {ids_seen[image_id]}")
            else:
                ids_seen[image_id] = i
            try:
                parsed = parse_caption(caption)
            except CaptionError as exc:
                add(PAIRS_FILE, i, _caption_kind(exc), str(exc))
                continue
            except ValueError as exc:
                add(PAIRS_FILE, i, "grammar", str(exc))
                continue
            if manifest is not None:
                if manifest.schema == "presence" and not isinstance(parsed, (NoRoads, PresenceFound)):
                    add(PAIRS_FILE, i, "schema", "coordinate caption in a presence dataset")
                if manifest.schema == "coordinates" and isinstance(parsed, PresenceFound):
                    add(PAIRS_FILE, i, "schema", "presence caption in a coordinate dataset")
            if isinstance(image_id, str):
                captions.setdefault(image_id, (i, caption))
        ids = [r.get("image_id") for r in raw_pairs if isinstance(r, dict)]
        if ids != sorted(ids, key=str):
            add(PAIRS_FILE, "-", "order", "records not sorted by image_id")
    elif raw_pairs is not None:
        add(PAIRS_FILE, "-", "schema", "top level must be a JSON array")

    gts: list[GroundTruthRecord] = []
    if isinstance(raw_gts, list):
        gt_ids = set()
        for i, rec in enumerate(raw_gts):
            try:
                g = GroundTruthRecord.from_json(rec)
            except (KeyError, TypeError, ValueError, IndexError) as exc:
                add(GT_FILE, i, "schema", f"bad record: {exc}")
                continue
            if g.image_id != g.tile.image_id:
                add(GT_FILE, i, "bad_id", f"image_id {g.image_id} does not match tile x/y")
            if g.image_id in gt_ids:
                add(GT_FILE, i, "duplicate_id", f"image_id {g.image_id} repeated")
            gt_ids.add(g.image_id)
            if manifest is not None and g.tile.zoom != manifest.zoom:
                add(GT_FILE, i, "zoom", f"zoom {g.tile.zoom} differs from manifest {manifest.zoom}")
            bad = False
            for road in g.roads:
                try:
                    check_pixel_polyline(road)
                except ValueError as exc:
                    kind = "coordinate_out_of_range" if "outside" in str(exc) else "geometry"
                    add(GT_FILE, i, kind, str(exc))
                    bad = True
                    break
                if polyline_arc_length(road) < min_road_px:
                    add(GT_FILE, i, "geometry", "road shorter than min_road_px")
                    bad = True
                    break
            gts.append(g)
            if bad:
                continue
            if g.image_id not in captions:
                add(GT_FILE, i, "orphan", f"no pair with image_id {g.image_id}")
                continue
            pair_index, caption = captions[g.image_id]
            schema = manifest.schema if manifest is not None else "coordinates"
            expected = serialize_caption(_caption(g.roads, schema))
            if caption != expected:
                add(PAIRS_FILE, pair_index, "coherence",
                    "caption does not match the ground-truth geometry")
        for image_id, (i, _) in captions.items():
            if image_id not in gt_ids:
                add(PAIRS_FILE, i, "orphan", f"no ground truth for {image_id}")
    elif raw_gts is not None:
        add(GT_FILE, "-", "schema", "top level must be a JSON array")

    split_ids = {}
    for name in (TRAIN_FILE, TEST_FILE):
        if (d / name).exists():
            raw = load(name)
            if isinstance(raw, list):
                split_ids[name] = [r.get("image_id") if isinstance(r, dict) else None for r in raw]
                for i, rec in enumerate(raw):
                    if not isinstance(rec, dict) or rec.get("image_id") not in captions:
                        add(name, i, "split", "record not present in pairs.json")
                    elif rec.get("caption") != captions[rec["image_id"]][1]:
                        add(name, i, "split", "caption differs from pairs.json")
    if len(split_ids) == 2:
        train, test = set(split_ids[TRAIN_FILE]), set(split_ids[TEST_FILE])
        if train & test:
            add(TEST_FILE, "-", "split", "train and test overlap")
        if raw_pairs is not None and len(train | test) != len(captions):
            add(TEST_FILE, "-", "split", "train and test do not cover pairs.json")

    if manifest is not None:
        n_pairs = len(raw_pairs) if isinstance(raw_pairs, list) else None
        positive = sum(1 for g in gts if g.roads)
        checks = [("total", manifest.total, n_pairs),
                  ("positive", manifest.positive, positive if raw_gts is not None else None),
                  ("negative", manifest.negative, len(gts) - positive if raw_gts is not None else None)]
        if len(split_ids) == 2:
            checks += [("train", manifest.train, len(split_ids[TRAIN_FILE])),
                       ("test", manifest.test, len(split_ids[TEST_FILE]))]
        for name, declared, actual in checks:
            if actual is not None and declared != actual:
                add(MANIFEST_FILE, name, "manifest_miscount",
                    f"manifest says {name}={declared}, recount gives {actual}")
        if manifest.positive + manifest.negative != manifest.total:
            add(MANIFEST_FILE, "counts", "manifest_miscount", "positive + negative != total")
        if manifest.train + manifest.test != manifest.total:
            add(MANIFEST_FILE, "split", "manifest_miscount", "train + test != total")
        if manifest.schema not in SCHEMAS:
            add(MANIFEST_FILE, "schema", "schema", f"unknown schema {manifest.schema!r}")
    return out


def read_dataset(ds_dir):
    """Load a dataset directory, raising SchemaViolation on the first problem."""
    problems = validate_dataset(ds_dir)
    if problems:
        v = problems[0]
        raise SchemaViolation(v.index, v.reason, file=v.file, kind=v.kind)
    d = Path(ds_dir)
    pairs = read_pairs(d / PAIRS_FILE)
    gts = read_ground_truth(d / GT_FILE)
    with open(d / MANIFEST_FILE, encoding="utf-8") as f:
        manifest = DatasetManifest.from_json(json.load(f))
    return pairs, gts, manifest


def read_split(ds_dir) -> tuple[list[InstructionPair], list[InstructionPair]]:
    d = Path(ds_dir)
    return read_pairs(d / TRAIN_FILE), read_pairs(d / TEST_FILE)


@dataclass
class BuiltDataset:
    pairs: list[InstructionPair]
    gts: list[GroundTruthRecord]
    manifest: DatasetManifest
    test_ids: list[str] = field(default_factory=list)

    def write(self, out_dir) -> Path:
        return write_dataset(self.pairs, self.gts, self.manifest, out_dir, self.test_ids)


def assemble_dataset(roads: Sequence[GeoLine], tiles: Sequence[TileId], schema: str = "coordinates",
                     config: BuildConfig = BuildConfig(), negative_fraction: Optional[float] = 0.40,
                     test_size: int = 100, seed: int = 0) -> BuiltDataset:
    """build_pairs -> balance_negatives -> split_dataset, plus the manifest."""
    pairs, gts = build_pairs(roads, tiles, schema, config)
    if negative_fraction is not None:
        pairs, gts = balance_negatives(pairs, gts, negative_fraction, seed)
    test_size = min(test_size, len(pairs))
    _, (test_pairs, _) = split_dataset(pairs, gts, test_size, seed)
    test_ids = [p.image_id for p in test_pairs]
    manifest = make_manifest(gts, tiles[0].zoom, schema, test_ids, seed, config.tile_size)
    return BuiltDataset(list(pairs), list(gts), manifest, test_ids)
