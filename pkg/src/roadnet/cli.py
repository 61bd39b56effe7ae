"""roadnet command line.

Exit codes: 0 success, 1 data or validation failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import re
import signal
import sys
import threading
from dataclasses import replace
from pathlib import Path

from roadnet import __version__
from roadnet.caption import serialize_caption
from roadnet.config import ConfigError, Settings, load_settings, override
from roadnet.dataset import (
    DatasetError,
    InstructionPair,
    assemble_dataset,
    load_roads_geojson,
    roads_to_geojson,
    validate_dataset,
    write_pairs,
)
from roadnet.geo import TileId, tiles_for_bbox

log = logging.getLogger("roadnet")

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2
TILE_FILE_RE = re.compile(r"^(\d+)_(\d+)\.png$")
MAX_BBOX_TILES = 200_000


class UsageError(Exception):
    pass


def _global_options(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="TOML config file")
    parser.add_argument("--seed", type=int, default=default)
    parser.add_argument("--zoom", type=int, default=default)
    parser.add_argument("-v", "--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roadnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"roadnet {__version__}")
    _global_options(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic world and dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-tiles", type=int, required=True)
    p.add_argument("--negative-fraction", type=float)
    p.add_argument("--schema", choices=("presence", "coordinates"))
    p.add_argument("--test-size", type=int)
    p.add_argument("--no-images", action="store_true", help="skip rendering PNG tiles")
    p.add_argument("--road-width", type=int)

    p = sub.add_parser("build", parents=[common], help="build pairs from GeoJSON roads")
    p.add_argument("--roads", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--tiles-from", help="directory of {x}_{y}.png tiles")
    src.add_argument("--bbox", type=float, nargs=4,
                     metavar=("MIN_LON", "MIN_LAT", "MAX_LON", "MAX_LAT"))
    p.add_argument("--schema", choices=("presence", "coordinates"))
    p.add_argument("--out", required=True)
    p.add_argument("--negative-fraction", type=float)
    p.add_argument("--no-balance", action="store_true")
    p.add_argument("--test-size", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--min-road-px", type=float)

    p = sub.add_parser("serve", parents=[common], help="run the mock tile server")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--host", default="127.0.0.1")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dir")
    src.add_argument("--world-seed", type=int)

    p = sub.add_parser("fetch", parents=[common], help="download tiles from an XYZ endpoint")
    p.add_argument("--source", required=True, help="base URL")
    p.add_argument("--tiles", required=True, help="JSON or text list of z/x/y")
    p.add_argument("--out", required=True)
    p.add_argument("--concurrency", type=int)
    p.add_argument("--attempts", type=int)
    p.add_argument("--api-key")

    p = sub.add_parser("baseline", parents=[common], help="run the RANSAC baseline detector")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("--gt", required=True, help="ground_truth.json or dataset directory")
    p.add_argument("--pred", required=True)
    p.add_argument("--report", help="write the JSON report (and figures) here")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.add_argument("--lenient", action="store_true")
    p.add_argument("--inclusion-rule", choices=("both_found", "gt_found", "all"))
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("validate", parents=[common], help="check dataset invariants")
    p.add_argument("--dataset", required=True)
    return parser


def _settings(args) -> Settings:
    s = load_settings(args.config)
    if args.seed is not None:
        s.seed = args.seed
    if args.zoom is not None:
        s.zoom = args.zoom
    s.verbose = s.verbose or bool(args.verbose)
    return s


def _test_size(requested: int, total: int) -> int:
    # keep at least 90% for training on small corpora
    size = min(requested, total // 10)
    if size < requested:
        log.warning("test set reduced from %d to %d for %d pairs", requested, size, total)
    return size


def cmd_synth(args, s: Settings) -> int:
    from roadnet.synth import build_synthetic_dataset, encode_png, generate_world, render_tile

    if args.n_tiles < 1:
        raise UsageError("--n-tiles must be >= 1")
    ds_opts = override(s.dataset, negative_fraction=args.negative_fraction, schema=args.schema,
                       test_size=args.test_size)
    if not 0.0 <= ds_opts.negative_fraction < 1.0:
        raise UsageError("--negative-fraction must lie in [0, 1)")
    world = replace(s.world, zoom=s.zoom)
    scenes = generate_world(s.seed, args.n_tiles, ds_opts.negative_fraction, s.zoom,
                            world.region, world)
    ds = build_synthetic_dataset(scenes, ds_opts.schema, s.build, ds_opts.negative_fraction,
                                 _test_size(ds_opts.test_size, args.n_tiles), s.seed)
    out = Path(args.out)
    ds.write(out)
    (out / "roads.geojson").write_text(
        json.dumps(roads_to_geojson(r for sc in scenes for r in sc.roads_geo)) + "\n",
        encoding="utf-8")
    if not args.no_images:
        style = override(s.render, road_width_px=args.road_width)
        img_dir = out / "images"
        img_dir.mkdir(parents=True, exist_ok=True)
        for scene in scenes:
            (img_dir / f"{scene.tile.image_id}.png").write_bytes(
                encode_png(render_tile(scene, style, s.build.tile_size)))
    m = ds.manifest
    print(f"wrote {m.total} pairs ({m.positive} positive, {m.negative} negative; "
          f"train {m.train}, test {m.test}) to {out}")
    return EXIT_OK


def _tiles_from_dir(directory: Path, zoom: int) -> list[TileId]:
    tiles = []
    for f in sorted(directory.iterdir()):
        m = TILE_FILE_RE.match(f.name)
        if m:
            tiles.append(TileId(zoom, int(m[1]), int(m[2])))
    return tiles


def cmd_build(args, s: Settings) -> int:
    build = override(s.build, epsilon_px=args.epsilon, min_road_px=args.min_road_px)
    ds_opts = override(s.dataset, negative_fraction=args.negative_fraction, schema=args.schema,
                       test_size=args.test_size)
    roads, skipped = load_roads_geojson(args.roads)
    if skipped:
        print(f"skipped {skipped} non-LineString features", file=sys.stderr)
    if args.tiles_from:
        d = Path(args.tiles_from)
        if not d.is_dir():
            raise UsageError(f"{d} is not a directory")
        tiles = _tiles_from_dir(d, s.zoom)
    else:
        min_lon, min_lat, max_lon, max_lat = args.bbox
        if not (min_lon < max_lon and min_lat < max_lat):
            raise UsageError("--bbox must be MIN_LON MIN_LAT MAX_LON MAX_LAT")
        tiles = tiles_for_bbox(min_lon, min_lat, max_lon, max_lat, s.zoom)
        if len(tiles) > MAX_BBOX_TILES:
            raise UsageError(f"--bbox covers {len(tiles)} tiles; limit is {MAX_BBOX_TILES}")
    fraction = None if args.no_balance else ds_opts.negative_fraction
    ds = assemble_dataset(roads, tiles, ds_opts.schema, build, fraction,
                          _test_size(ds_opts.test_size, len(tiles)), s.seed)
    ds.write(args.out)
    m = ds.manifest
    print(f"wrote {m.total} pairs ({m.positive} positive, {m.negative} negative) to {args.out}")
    return EXIT_OK


def cmd_serve(args, s: Settings) -> int:
    from roadnet.tiles import TileServer

    try:
        server = TileServer(directory=args.dir, world_seed=args.world_seed,
                            zoom=s.zoom if args.world_seed is not None or args.zoom else None,
                            host=args.host, port=args.port,
                            url_template=s.fetch.url_template, world=s.world)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    except OSError as exc:
        print(f"cannot bind {args.host}:{args.port}: {exc}", file=sys.stderr)
        return EXIT_DATA

    def stop(signum, frame):
        threading.Thread(target=server._httpd.shutdown, daemon=True).start()

    signal.signal(signal.SIGINT, stop)
    signal.signal(signal.SIGTERM, stop)
    print(f"serving on {server.url}", flush=True)
    server.serve_forever()
    server._httpd.server_close()
    return EXIT_OK


def read_tile_list(path) -> list[TileId]:
    text = Path(path).read_text(encoding="utf-8")
    tiles = []
    if text.lstrip().startswith("["):
        for item in json.loads(text):
            if isinstance(item, dict):
                z = item.get("zoom", item.get("z"))
                tiles.append(TileId(int(z), int(item["x"]), int(item["y"])))
            else:
                z, x, y = item
                tiles.append(TileId(int(z), int(x), int(y)))
        return tiles
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            z, x, y = re.split(r"[/\s,]+", line)
            tiles.append(TileId(int(z), int(x), int(y)))
    return tiles


def cmd_fetch(args, s: Settings) -> int:
    from roadnet.tiles import Outcome, TileSourceConfig, cache_tiles, fetch_tiles

    try:
        tiles = read_tile_list(args.tiles)
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot read tile list {args.tiles}: {exc}") from exc
    retry = override(s.retry, attempts=args.attempts)
    try:
        cfg = TileSourceConfig(
            base_url=args.source, url_template=s.fetch.url_template,
            max_concurrent_fetches=args.concurrency or s.fetch.max_concurrent_fetches,
            retry=retry, timeout_ms=s.fetch.timeout_ms,
            api_key=args.api_key or s.fetch.api_key, tile_size=s.build.tile_size)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    results = fetch_tiles(cfg, tiles, seed=s.seed)
    written = cache_tiles(results, args.out)
    tally = {o: sum(1 for r in results if r.outcome is o) for o in Outcome}
    print(f"fetched {written} tiles; " + ", ".join(f"{o.value}: {n}" for o, n in tally.items()))
    for r in results:
        if r.outcome in (Outcome.TRANSPORT_ERROR, Outcome.DECODE_ERROR):
            print(f"  {r.tile.zoom}/{r.tile.x}/{r.tile.y}: {r.outcome.value} {r.detail}",
                  file=sys.stderr)
    failed = tally[Outcome.TRANSPORT_ERROR] + tally[Outcome.DECODE_ERROR]
    return EXIT_DATA if failed else EXIT_OK


def cmd_baseline(args, s: Settings) -> int:
    from roadnet.synth import baseline_detect, load_png

    d = Path(args.images)
    if not d.is_dir():
        raise UsageError(f"{d} is not a directory")
    preds = []
    for f in sorted(d.iterdir()):
        if not TILE_FILE_RE.match(f.name):
            continue
        cap = baseline_detect(load_png(f), s.detect)
        preds.append(InstructionPair(f.stem, serialize_caption(cap)))
    preds.sort(key=lambda p: p.image_id)
    write_pairs(preds, args.out)
    print(f"wrote {len(preds)} predictions to {args.out}")
    return EXIT_OK


def cmd_eval(args, s: Settings) -> int:
    from roadnet.evaluate import evaluate, write_report

    cfg = override(s.eval, inclusion_rule=args.inclusion_rule)
    if args.lenient:
        cfg = replace(cfg, strict=False)
    report = evaluate(args.gt, args.pred, cfg)
    if args.format == "json":
        print(json.dumps(report.to_json(), indent=2))
    else:
        print(report.render_text())
    if args.report:
        path = write_report(report, args.report)
        if not args.no_figures:
            from roadnet.plotting import write_figures

            for fig in write_figures(report, path):
                log.info("figure written: %s", fig)
    return EXIT_OK


def cmd_validate(args, s: Settings) -> int:
    if not Path(args.dataset).is_dir():
        raise UsageError(f"{args.dataset} is not a directory")
    problems = validate_dataset(args.dataset, s.build.min_road_px)
    if not problems:
        print(f"{args.dataset}: ok")
        return EXIT_OK
    for v in problems:
        print(str(v))
    print(f"{len(problems)} violation(s)", file=sys.stderr)
    return EXIT_DATA


COMMANDS = {
    "synth": cmd_synth,
    "build": cmd_build,
    "serve": cmd_serve,
    "fetch": cmd_fetch,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = _settings(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if settings.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, settings)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
