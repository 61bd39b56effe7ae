import hashlib
import io

import httpx
import numpy as np
import pytest
from PIL import Image

from roadnet.geo import TileId
from roadnet.synth import decode_png, encode_png, generate_world, render_tile
from roadnet.tiles import (
    API_KEY_ENV,
    Outcome,
    RetryPolicy,
    TileFetchResult,
    TileServer,
    TileSourceConfig,
    cache_tiles,
    fetch_tiles,
    serve_tiles,
)

Z = 16


@pytest.fixture(scope="module")
def tile_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiles")
    scenes = generate_world(5, 4)
    for s in scenes:
        (d / f"{s.tile.x}_{s.tile.y}.png").write_bytes(encode_png(render_tile(s)))
    return d, [s.tile for s in scenes]


def no_sleep(_):
    pass


def test_static_file_served_exactly(tile_dir):
    d, tiles = tile_dir
    t = tiles[0]
    with serve_tiles(d) as srv:
        r = httpx.get(f"{srv.url}/tiles/{Z}/{t.x}/{t.y}.png")
        assert r.status_code == 200
        assert r.headers["content-type"] == "image/png"
        assert r.content == (d / f"{t.x}_{t.y}.png").read_bytes()
        assert httpx.get(f"{srv.url}/healthz").text == "ok"


def test_missing_tile_is_404_without_retry(tile_dir):
    d, _ = tile_dir
    missing = TileId(Z, 1, 1)
    with serve_tiles(d) as srv:
        res = fetch_tiles(TileSourceConfig(srv.url), [missing], sleep=no_sleep)
        assert res[0].outcome is Outcome.NOT_FOUND
        assert len(srv.requests_for(f"/tiles/{Z}/1/1.png")) == 1


def test_generator_mode_is_deterministic():
    t = generate_world(8, 1)[0].tile
    with serve_tiles(world_seed=8) as a, serve_tiles(world_seed=8) as b:
        ra = httpx.get(f"{a.url}/tiles/{Z}/{t.x}/{t.y}.png").content
        rb = httpx.get(f"{b.url}/tiles/{Z}/{t.x}/{t.y}.png").content
    assert ra == rb
    assert decode_png(ra).shape == (1280, 1280, 3)


def test_fail_twice_then_succeed(tile_dir):
    d, tiles = tile_dir
    t = tiles[1]
    path = f"/tiles/{Z}/{t.x}/{t.y}.png"
    slept = []
    with serve_tiles(d) as srv:
        srv.fail_script[path] = 2
        res = fetch_tiles(TileSourceConfig(srv.url), [t], sleep=slept.append)
        assert res[0].outcome is Outcome.IMAGE and res[0].attempts == 3
        assert [r.status for r in srv.requests_for(path)] == [503, 503, 200]
    assert slept == [0.2, 0.4]


def test_retries_exhausted(tile_dir):
    d, tiles = tile_dir
    t = tiles[1]
    path = f"/tiles/{Z}/{t.x}/{t.y}.png"
    with serve_tiles(d) as srv:
        srv.fail_script[path] = 10
        res = fetch_tiles(TileSourceConfig(srv.url), [t], sleep=no_sleep)
        assert res[0].outcome is Outcome.TRANSPORT_ERROR
        assert len(srv.requests_for(path)) == 3


def test_backoff_grows_and_jitter_is_bounded():
    assert RetryPolicy(attempts=4).delays_s() == [0.2, 0.4, 0.8]
    rng = np.random.default_rng(0)
    for d, base in zip(RetryPolicy(attempts=4, jitter=0.25).delays_s(rng), [0.2, 0.4, 0.8]):
        assert 0.75 * base <= d <= 1.25 * base


def test_concurrency_bound_and_order():
    tiles = [s.tile for s in generate_world(2, 24)]
    with serve_tiles(world_seed=2, delay_s=0.05) as srv:
        res = fetch_tiles(TileSourceConfig(srv.url, max_concurrent_fetches=3), tiles)
        assert srv.max_in_flight <= 3
        assert srv.max_in_flight >= 2
    assert [r.tile for r in res] == tiles
    assert all(r.outcome is Outcome.IMAGE for r in res)


def test_transport_error_for_dead_server():
    with serve_tiles(world_seed=1) as srv:
        url = srv.url
    res = fetch_tiles(TileSourceConfig(url, timeout_ms=500), [TileId(Z, 0, 0)], sleep=no_sleep)
    assert res[0].outcome is Outcome.TRANSPORT_ERROR
    assert res[0].attempts == 3


def test_api_key_header_and_env_override(tile_dir, monkeypatch):
    d, tiles = tile_dir
    t = tiles[0]
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    with serve_tiles(d, require_api_key="sekrit") as srv:
        bad = fetch_tiles(TileSourceConfig(srv.url, api_key="wrong"), [t], sleep=no_sleep)
        assert bad[0].outcome is Outcome.TRANSPORT_ERROR and bad[0].attempts == 1
        ok = fetch_tiles(TileSourceConfig(srv.url, api_key="sekrit"), [t])
        assert ok[0].outcome is Outcome.IMAGE
        monkeypatch.setenv(API_KEY_ENV, "sekrit")
        env = fetch_tiles(TileSourceConfig(srv.url, api_key="wrong"), [t])
        assert env[0].outcome is Outcome.IMAGE
        assert srv.request_log[-1].headers["X-Api-Key"] == "sekrit"


def test_decode_errors(tmp_path):
    small = io.BytesIO()
    Image.new("RGB", (256, 256)).save(small, format="PNG")
    (tmp_path / "10_10.png").write_bytes(small.getvalue())
    (tmp_path / "12_10.png").write_bytes(b"definitely not a png")
    with serve_tiles(tmp_path) as srv:
        res = fetch_tiles(TileSourceConfig(srv.url), [TileId(Z, 10, 10), TileId(Z, 12, 10)])
    assert [r.outcome for r in res] == [Outcome.DECODE_ERROR, Outcome.DECODE_ERROR]
    assert "256x256" in res[0].detail


def test_config_validation():
    with pytest.raises(ValueError):
        TileSourceConfig("http://x", url_template="/tiles/{z}/{x}.png")
    with pytest.raises(ValueError):
        TileSourceConfig("http://x", max_concurrent_fetches=0)
    with pytest.raises(ValueError):
        TileServer()


def _digest(directory):
    h = hashlib.sha256()
    for p in sorted(directory.iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def test_cache_tiles(tmp_path):
    img = np.zeros((1280, 1280, 3), np.uint8)
    body = encode_png(img)
    results = [TileFetchResult(TileId(Z, 2 * i, 0), Outcome.IMAGE, img, body) for i in range(3)]
    results.append(TileFetchResult(TileId(Z, 9, 9), Outcome.NOT_FOUND))
    assert cache_tiles(results, tmp_path / "a") == 3
    assert sorted(p.name for p in (tmp_path / "a").iterdir()) == ["0_0.png", "2_0.png", "4_0.png"]
    first = _digest(tmp_path / "a")
    assert cache_tiles(results, tmp_path / "a") == 3
    assert _digest(tmp_path / "a") == first
    assert cache_tiles([], tmp_path / "b") == 0
