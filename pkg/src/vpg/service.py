"""HTTP front end over :class:`vpg.engine.Engine`.

GET /v1/reverse?product=SIG
GET /v1/forward?scene=SIG[&scene=SIG...]&gender=..&country=..
GET /v1/metrics            (JSON; ``?format=text`` for plain counters)
GET /healthz               (503 until indexes are loaded)
"""

from __future__ import annotations

import json
import logging
import signal
import threading
import time
import uuid
from bisect import bisect_left
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from .errors import UnknownEntityError
from .forward_stl import UserContext

log = logging.getLogger(__name__)

LATENCY_BUCKETS_MS = (1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000)


class LatencyHistogram:
    def __init__(self, bounds=LATENCY_BUCKETS_MS):
        self.bounds = tuple(bounds)
        self.counts = [0] * (len(self.bounds) + 1)
        self.total_ms = 0.0
        self._lock = threading.Lock()

    def observe(self, ms: float) -> None:
        with self._lock:
            self.counts[bisect_left(self.bounds, ms)] += 1
            self.total_ms += ms

    def snapshot(self) -> dict:
        with self._lock:
            labels = [f"le_{b}ms" for b in self.bounds] + ["le_inf"]
            return {"count": sum(self.counts), "sum_ms": round(self.total_ms, 3), "buckets": dict(zip(labels, self.counts))}


class ServiceState:
    def __init__(self, engine):
        self.engine = engine
        self.ready = threading.Event()
        self.load_error: str | None = None
        self.latency = {name: LatencyHistogram() for name in ("reverse", "forward", "metrics", "healthz")}
        self.status_counts: dict[int, int] = {}
        self._lock = threading.Lock()

    def load(self) -> None:
        try:
            self.engine.load(require_calibration=False)
            self.ready.set()
            log.info("indexes loaded; service ready")
        except Exception as exc:  # readiness stays false; /healthz reports it
            self.load_error = str(exc)
            log.error("index load failed: %s", exc)

    def count(self, status: int) -> None:
        with self._lock:
            self.status_counts[status] = self.status_counts.get(status, 0) + 1

    def metrics(self) -> dict:
        out = self.engine.metrics() if self.ready.is_set() else {}
        out["ready"] = self.ready.is_set()
        out["latency"] = {k: h.snapshot() for k, h in self.latency.items()}
        with self._lock:
            out["responses"] = {str(k): v for k, v in sorted(self.status_counts.items())}
        return out


def metrics_text(metrics: dict, prefix: str = "vpg") -> str:
    """Flatten nested numeric metrics into ``name value`` lines."""
    lines = []

    def walk(node, path):
        if isinstance(node, dict):
            for k, v in sorted(node.items()):
                walk(v, path + [str(k)])
        elif isinstance(node, bool):
            lines.append(f"{'_'.join(path)} {int(node)}")
        elif isinstance(node, (int, float)):
            lines.append(f"{'_'.join(path)} {node}")

    walk(metrics, [prefix])
    return "\n".join(lines) + "\n"


class _HttpError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


def make_handler(state: ServiceState):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "vpg"

        def log_message(self, fmt, *args):  # route access logs through logging
            log.debug("%s " + fmt, self.address_string(), *args)

        def _send(self, status: int, body: bytes, ctype: str) -> None:
            # record before writing so a client never observes its own request missing
            route = getattr(self, "_route", None)
            if route is not None:
                state.latency[route[0]].observe((time.perf_counter() - route[1]) * 1000.0)
                self._route = None
            state.count(status)
            self.send_response(status)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _json(self, status: int, obj) -> None:
            self._send(status, json.dumps(obj, sort_keys=True).encode(), "application/json")

        def do_GET(self):
            url = urlsplit(self.path)
            params = parse_qs(url.query)
            route = {
                "/v1/reverse": ("reverse", self._reverse),
                "/v1/forward": ("forward", self._forward),
                "/v1/metrics": ("metrics", self._metrics),
                "/healthz": ("healthz", self._healthz),
            }.get(url.path)
            if route is None:
                self._json(404, {"error": f"no route {url.path}"})
                return
            name, fn = route
            self._route = (name, time.perf_counter())
            try:
                fn(params)
            except _HttpError as exc:
                self._json(exc.status, {"error": str(exc)})
            except UnknownEntityError as exc:
                self._json(404, {"error": str(exc)})
            except ValueError as exc:
                self._json(400, {"error": str(exc)})
            except Exception:
                incident = uuid.uuid4().hex[:12]
                log.exception("internal error %s on %s", incident, url.path)
                self._json(500, {"error": "internal error", "id": incident})

        def _require_ready(self):
            if not state.ready.is_set():
                raise _HttpError(503, "indexes not loaded")

        def _one(self, params, key) -> str:
            values = params.get(key)
            if not values or not values[0]:
                raise ValueError(f"missing query parameter {key!r}")
            if len(values) > 1:
                raise ValueError(f"parameter {key!r} given more than once")
            return values[0]

        def _reverse(self, params):
            self._require_ready()
            self._json(200, state.engine.reverse(self._one(params, "product")))

        def _forward(self, params):
            self._require_ready()
            scenes = params.get("scene") or []
            if not scenes:
                raise ValueError("missing query parameter 'scene'")
            ctx = UserContext(
                gender=params.get("gender", ["unspecified"])[0],
                country=params.get("country", ["unspecified"])[0],
            )
            if len(scenes) == 1:
                self._json(200, state.engine.forward(scenes[0], ctx))
            else:
                self._json(200, state.engine.forward_batch(scenes, ctx))

        def _metrics(self, params):
            m = state.metrics()
            if params.get("format", ["json"])[0] == "text":
                self._send(200, metrics_text(m).encode(), "text/plain; version=0.0.4")
            else:
                self._json(200, m)

        def _healthz(self, params):
            if state.ready.is_set():
                self._json(200, {"status": "ok"})
            else:
                self._json(503, {"status": "loading" if state.load_error is None else "failed", "error": state.load_error})

    return Handler


class VPGServer(ThreadingHTTPServer):
    daemon_threads = False  # server_close() joins in-flight request threads
    block_on_close = True


def create_server(engine, host: str = "127.0.0.1", port: int = 0, load_async: bool = True) -> tuple[VPGServer, ServiceState]:
    state = ServiceState(engine)
    server = VPGServer((host, port), make_handler(state))
    if load_async:
        threading.Thread(target=state.load, name="vpg-load", daemon=True).start()
    return server, state


def serve(engine) -> None:
    cfg = engine.config.service
    server, _ = create_server(engine, cfg.host, cfg.port)
    host, port = server.server_address[:2]
    log.info("listening on http://%s:%d", host, port)
    stop = threading.Event()

    def shutdown(signum, frame):
        if not stop.is_set():
            stop.set()
            log.info("signal %d: draining in-flight requests", signum)
            threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGTERM, shutdown)
    signal.signal(signal.SIGINT, shutdown)
    try:
        server.serve_forever()
    finally:
        server.server_close()
        log.info("stopped")
