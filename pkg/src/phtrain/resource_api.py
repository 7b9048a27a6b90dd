"""Optional HTTP binding for a station's resource and object stores.

``dispatch`` maps (method, path, body) to (status, content type, body) and is
what the tests exercise; ``serve`` wraps it in a stdlib HTTP server.

Routes::

    GET /Patient/{id}   GET /Media/{id}   GET /ImageStudy/{id}  (alias /ImagingStudy/{id})
    GET /Patient?study={id}
    GET /objects/{key}  PUT /objects/{key}
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, unquote, urlsplit

from .errors import NotFoundError
from .station import RESOURCE_ALIASES, RESOURCE_TYPES, StationStore

JSON = "application/json"
OCTETS = "application/octet-stream"


def _json(status: int, doc) -> tuple[int, str, bytes]:
    return status, JSON, json.dumps(doc, sort_keys=True).encode("utf-8")


def _error(status: int, message: str):
    return _json(status, {"error": message})


def dispatch(store: StationStore, method: str, path: str, body: bytes = b"") -> tuple[int, str, bytes]:
    url = urlsplit(path)
    parts = [unquote(p) for p in url.path.split("/") if p]
    if not parts:
        return _error(404, "no such route")
    head = parts[0]

    if head == "objects":
        key = "/".join(parts[1:])
        if not key:
            return _error(404, "object key required")
        if method == "GET":
            try:
                return 200, OCTETS, store.objects.get(key)
            except NotFoundError as exc:
                return _error(404, str(exc))
        if method == "PUT":
            with store.lock:
                store.objects.put(key, body)
            return _json(201, {"key": key, "bytes": len(body)})
        return _error(405, f"{method} not allowed on objects")

    kind = RESOURCE_ALIASES.get(head, head)
    if kind not in RESOURCE_TYPES:
        return _error(404, f"unknown resource type {head!r}")
    if method != "GET":
        return _error(405, "resources are read-only over HTTP")
    if len(parts) == 1:
        query = parse_qs(url.query)
        if kind != "Patient" or "study" not in query:
            return _error(400, "only Patient?study={id} searches are supported")
        try:
            patients = store.resources.search_patients(query["study"][0])
        except NotFoundError as exc:
            return _error(404, str(exc))
        return _json(200, {"resourceType": "Bundle", "total": len(patients), "entry": [p.to_json() for p in patients]})
    if len(parts) != 2:
        return _error(404, "no such route")
    try:
        return _json(200, store.resources.read(kind, parts[1]).to_json())
    except NotFoundError as exc:
        return _error(404, str(exc))


def make_handler(store: StationStore):
    class Handler(BaseHTTPRequestHandler):
        def _reply(self, status, ctype, body):
            self.send_response(status)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            self._reply(*dispatch(store, "GET", self.path))

        def do_PUT(self):
            n = int(self.headers.get("Content-Length") or 0)
            self._reply(*dispatch(store, "PUT", self.path, self.rfile.read(n)))

        def log_message(self, fmt, *args):  # keep test output quiet
            pass

    return Handler


def serve(store: StationStore, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Start a background server; ``server.server_address`` holds the bound port."""
    server = ThreadingHTTPServer((host, port), make_handler(store))
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server
