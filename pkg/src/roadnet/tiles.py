"""XYZ imagery over HTTP: a bounded-concurrency client and a mock tile server.

Wire contract::

    GET {base_url}{url_template}      -> 200 image/png (1280 x 1280 RGB) | 404
    GET /healthz                      -> 200 "ok"

The client sends ``X-Api-Key`` when a key is configured; the environment
variable ROADNET_TILE_API_KEY overrides the configured key.
"""
from __future__ import annotations

import enum
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Optional, Sequence

import httpx
import numpy as np

from roadnet.geo import TILE_SIZE, TileId
from roadnet.synth import WorldConfig, decode_png, encode_png, render_tile, scene_for_tile

log = logging.getLogger(__name__)

API_KEY_ENV = "ROADNET_TILE_API_KEY"
DEFAULT_TEMPLATE = "/tiles/{z}/{x}/{y}.png"


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 3
    initial_backoff_ms: float = 200.0
    multiplier: float = 2.0
    # +/- fraction applied to each delay
    jitter: float = 0.0

    def delays_s(self, rng: Optional[np.random.Generator] = None) -> list[float]:
        out = []
        for k in range(self.attempts - 1):
            d = self.initial_backoff_ms * self.multiplier ** k
            if self.jitter and rng is not None:
                d *= 1.0 + self.jitter * float(rng.uniform(-1.0, 1.0))
            out.append(d / 1000.0)
        return out


@dataclass(frozen=True)
class TileSourceConfig:
    base_url: str
    url_template: str = DEFAULT_TEMPLATE
    max_concurrent_fetches: int = 8
    retry: RetryPolicy = RetryPolicy()
    timeout_ms: float = 10_000.0
    api_key: Optional[str] = None
    tile_size: int = TILE_SIZE

    def __post_init__(self):
        if self.retry.attempts < 1:
            raise ValueError("retry attempts must be >= 1")
        if self.max_concurrent_fetches < 1:
            raise ValueError("max_concurrent_fetches must be >= 1")
        if self.timeout_ms <= 0:
            raise ValueError("timeout must be positive")
        for key in ("{z}", "{x}", "{y}"):
            if key not in self.url_template:
                raise ValueError(f"url_template lacks {key}")

    def url_for(self, tile: TileId) -> str:
        path = self.url_template.format(z=tile.zoom, x=tile.x, y=tile.y)
        return self.base_url.rstrip("/") + path

    def effective_api_key(self) -> Optional[str]:
        return os.environ.get(API_KEY_ENV) or self.api_key


class Outcome(enum.Enum):
    IMAGE = "image"
    NOT_FOUND = "not_found"
    TRANSPORT_ERROR = "transport_error"
    DECODE_ERROR = "decode_error"


@dataclass
class TileFetchResult:
    tile: TileId
    outcome: Outcome
    image: Optional[np.ndarray] = field(default=None, repr=False)
    content: Optional[bytes] = field(default=None, repr=False)
    detail: str = ""
    attempts: int = 0


def _fetch_one(client: httpx.Client, cfg: TileSourceConfig, tile: TileId,
               sleep: Callable[[float], None], delays: list[float]) -> TileFetchResult:
    url = cfg.url_for(tile)
    detail = ""
    for attempt in range(1, cfg.retry.attempts + 1):
        try:
            resp = client.get(url)
        except httpx.TransportError as exc:
            detail = f"{type(exc).__name__}: {exc}"
        else:
            if resp.status_code == 200:
                body = resp.content
                try:
                    img = decode_png(body)
                except Exception as exc:  # PIL raises a zoo of types
                    return TileFetchResult(tile, Outcome.DECODE_ERROR, detail=str(exc),
                                           attempts=attempt)
                if img.shape[:2] != (cfg.tile_size, cfg.tile_size):
                    return TileFetchResult(
                        tile, Outcome.DECODE_ERROR,
                        detail=f"tile is {img.shape[1]}x{img.shape[0]}, expected "
                               f"{cfg.tile_size}x{cfg.tile_size}", attempts=attempt)
                return TileFetchResult(tile, Outcome.IMAGE, image=img, content=body,
                                       attempts=attempt)
            if resp.status_code == 404:
                return TileFetchResult(tile, Outcome.NOT_FOUND, detail="404", attempts=attempt)
            detail = f"HTTP {resp.status_code}"
            if resp.status_code < 500:
                return TileFetchResult(tile, Outcome.TRANSPORT_ERROR, detail=detail,
                                       attempts=attempt)
        if attempt < cfg.retry.attempts:
            log.debug("retrying %s after %s", url, detail)
            sleep(delays[attempt - 1])
    return TileFetchResult(tile, Outcome.TRANSPORT_ERROR, detail=detail,
                           attempts=cfg.retry.attempts)


def fetch_tiles(cfg: TileSourceConfig, tiles: Sequence[TileId],
                sleep: Callable[[float], None] = time.sleep, seed: int = 0
                ) -> list[TileFetchResult]:
    """Fetch tiles with at most ``max_concurrent_fetches`` requests in flight.

    Results come back in request order. Per-tile failures are reported as
    outcomes, never raised.
    """
    headers = {}
    key = cfg.effective_api_key()
    if key:
        headers["X-Api-Key"] = key
    limits = httpx.Limits(max_connections=cfg.max_concurrent_fetches,
                          max_keepalive_connections=cfg.max_concurrent_fetches)
    rng = np.random.default_rng(seed)
    delay_plan = [cfg.retry.delays_s(rng) for _ in tiles]
    with httpx.Client(headers=headers, timeout=cfg.timeout_ms / 1000.0, limits=limits) as client:
        with ThreadPoolExecutor(max_workers=cfg.max_concurrent_fetches) as pool:
            futures = [pool.submit(_fetch_one, client, cfg, t, sleep, delay_plan[i])
                       for i, t in enumerate(tiles)]
            return [f.result() for f in futures]


def cache_tiles(results: Sequence[TileFetchResult], out_dir) -> int:
    """Write each fetched image as ``{x}_{y}.png``; returns the number written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for r in results:
        if r.outcome is Outcome.IMAGE and r.content is not None:
            (out / f"{r.tile.x}_{r.tile.y}.png").write_bytes(r.content)
            n += 1
    return n


# --- mock server ------------------------------------------------------------

@dataclass
class RequestRecord:
    path: str
    status: int
    headers: dict
    started: float
    finished: float


def _template_regex(template: str) -> re.Pattern:
    pattern = re.escape(template)
    for key in ("z", "x", "y"):
        pattern = pattern.replace(re.escape("{" + key + "}"), rf"(?P<{key}>\d+)")
    return re.compile("^" + pattern + "$")


class TileServer:
    """Threaded mock imagery server, backed by a directory or a synthetic world.

    Directory mode serves ``{dir}/{x}_{y}.png`` (or ``{dir}/{z}/{x}/{y}.png``).
    Generator mode renders the synthetic scene for the requested tile on
    demand, so bodies depend only on (seed, z, x, y).
    """

    def __init__(self, directory=None, world_seed: Optional[int] = None, zoom: Optional[int] = None,
                 host: str = "127.0.0.1", port: int = 0, url_template: str = DEFAULT_TEMPLATE,
                 delay_s: float = 0.0, world: Optional[WorldConfig] = None,
                 require_api_key: Optional[str] = None):
        if (directory is None) == (world_seed is None):
            raise ValueError("give exactly one of directory or world_seed")
        if directory is not None and not Path(directory).is_dir():
            raise FileNotFoundError(f"tile directory {directory} does not exist")
        self.directory = Path(directory) if directory is not None else None
        self.world_seed = world_seed
        self.zoom = zoom
        self.delay_s = delay_s
        self.world = world or WorldConfig()
        self.require_api_key = require_api_key
        self._route = _template_regex(url_template)
        self._lock = threading.Lock()
        self.request_log: list[RequestRecord] = []
        self.in_flight = 0
        self.max_in_flight = 0
        # path -> number of 503 responses still to send before serving normally
        self.fail_script: dict[str, int] = {}
        self._render = lru_cache(maxsize=64)(self._render_png)
        self._httpd = ThreadingHTTPServer((host, port), self._handler_class())
        self._httpd.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def url(self) -> str:
        host = self._httpd.server_address[0]
        return f"http://{host}:{self.port}"

    def start(self) -> "TileServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start() if self._thread is None else self

    def __exit__(self, *exc):
        self.stop()

    def requests_for(self, path: str) -> list[RequestRecord]:
        with self._lock:
            return [r for r in self.request_log if r.path == path]

    def _render_png(self, z: int, x: int, y: int) -> bytes:
        scene = scene_for_tile(self.world_seed, TileId(z, x, y), self.world)
        return encode_png(render_tile(scene))

    def _lookup(self, z: int, x: int, y: int) -> Optional[bytes]:
        if self.zoom is not None and z != self.zoom:
            return None
        try:
            TileId(z, x, y)
        except ValueError:
            return None
        if self.directory is None:
            return self._render(z, x, y)
        for candidate in (self.directory / f"{x}_{y}.png",
                          self.directory / str(z) / str(x) / f"{y}.png"):
            if candidate.is_file():
                return candidate.read_bytes()
        return None

    def _handler_class(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                log.debug("%s " + fmt, self.address_string(), *args)

            def _record(self, status: int) -> None:
                # logged before the body goes out, so a client never sees an
                # unlogged response
                if self._logged:
                    return
                self._logged = True
                with server._lock:
                    server.in_flight -= 1
                    server.request_log.append(RequestRecord(
                        self.path, status, dict(self.headers.items()), self._started,
                        time.monotonic()))

            def _send(self, status: int, body: bytes, ctype: str) -> None:
                self._record(status)
                self.send_response(status)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                self._started = time.monotonic()
                self._logged = False
                with server._lock:
                    server.in_flight += 1
                    server.max_in_flight = max(server.max_in_flight, server.in_flight)
                try:
                    self._dispatch()
                finally:
                    self._record(500)

            def _dispatch(self) -> int:
                path = self.path.split("?", 1)[0]
                if path == "/healthz":
                    self._send(200, b"ok", "text/plain")
                    return 200
                if server.delay_s:
                    time.sleep(server.delay_s)
                if server.require_api_key and \
                        self.headers.get("X-Api-Key") != server.require_api_key:
                    self._send(403, b"forbidden", "text/plain")
                    return 403
                with server._lock:
                    remaining = server.fail_script.get(path, 0)
                    if remaining:
                        server.fail_script[path] = remaining - 1
                if remaining:
                    self._send(503, b"unavailable", "text/plain")
                    return 503
                m = server._route.match(path)
                body = None
                if m:
                    body = server._lookup(int(m["z"]), int(m["x"]), int(m["y"]))
                if body is None:
                    self._send(404, b"not found", "text/plain")
                    return 404
                self._send(200, body, "image/png")
                return 200

        return Handler


def serve_tiles(directory=None, world_seed: Optional[int] = None, host: str = "127.0.0.1",
                port: int = 0, zoom: Optional[int] = None, **kwargs) -> TileServer:
    """Start a mock tile server in a background thread and return its handle."""
    return TileServer(directory, world_seed, zoom, host, port, **kwargs).start()
