"""HTTP face of the pipeline for UIs and scripted clients.

Stateless between requests apart from the immutable models and a rolling
window of recent text features for the space view. All bodies are JSON;
validation failures come back as 400 with a machine-readable code, and a
caller-supplied config hash that disagrees with the loaded artifacts is
a 409.
"""

import json
import os
import threading
from collections import deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import numpy as np

from .contrastive import FEATURE_DIM
from .motion import clip_to_dict
from .retrieval import DEFAULT_NEIGHBORS, GenerationRequest, LibraryError, generate
from .text_encoder import TextError, embed, tokenize

DEFAULT_PORT = 8973
PORT_ENV = "GESTUREKIT_PORT"
RECENT_TEXTS = 100


class ServiceState:
    """Loaded models plus the rolling text-feature window."""

    def __init__(self, text_encoder, gesture_encoder, library, provider,
                 config_hash, seed=0):
        self.text_encoder = text_encoder
        self.gesture_encoder = gesture_encoder
        self.library = library
        self.provider = provider
        self.config_hash = str(config_hash)
        self.seed = int(seed)
        self.recent = deque(maxlen=RECENT_TEXTS)
        self._lock = threading.Lock()

    def record_text(self, label, f_t):
        with self._lock:
            self.recent.append((label, np.asarray(f_t, dtype=np.float64)))

    def recent_texts(self):
        with self._lock:
            return list(self.recent)

    def projection(self):
        # seeded orthonormal 32 -> 2 map, fixed for the server lifetime
        rng = np.random.default_rng(self.seed)
        q, _ = np.linalg.qr(rng.standard_normal((FEATURE_DIM, 2)))
        return q


def _json_bytes(doc):
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode()


class _Handler(BaseHTTPRequestHandler):
    state: ServiceState = None
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        pass

    def _reply(self, code, doc):
        body = _json_bytes(doc)
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _fail(self, code, error_code, message):
        self._reply(code, {"error": {"code": error_code, "message": message}})

    def _read_body(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        try:
            doc = json.loads(raw.decode() or "{}")
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise _BadRequest("bad-json", f"body does not parse: {e}") from None
        if not isinstance(doc, dict):
            raise _BadRequest("bad-json", "body must be a JSON object")
        return doc

    # -- routes --

    def do_GET(self):
        url = urlparse(self.path)
        try:
            if url.path == "/healthz":
                self._reply(200, {"status": "ok", "config_hash": self.state.config_hash})
            elif url.path.startswith("/library/"):
                self._get_library_clip(url.path[len("/library/"):])
            elif url.path == "/space":
                self._get_space(parse_qs(url.query))
            else:
                self._fail(404, "unknown-route", f"no route {url.path}")
        except _BadRequest as e:
            self._fail(400, e.code, e.message)
        except (TextError, LibraryError, ValueError, TypeError) as e:
            self._fail(400, "validation", str(e))

    def do_POST(self):
        url = urlparse(self.path)
        try:
            body = self._read_body()
            if url.path == "/tokenize":
                self._post_tokenize(body)
            elif url.path == "/attention":
                self._post_attention(body)
            elif url.path == "/generate":
                self._post_generate(body)
            else:
                self._fail(404, "unknown-route", f"no route {url.path}")
        except _BadRequest as e:
            self._fail(400, e.code, e.message)
        except (TextError, LibraryError, ValueError, TypeError) as e:
            self._fail(400, "validation", str(e))

    def _require_text(self, body):
        text = body.get("text")
        if not isinstance(text, str):
            raise _BadRequest("validation", "field 'text' must be a string")
        return text

    def _post_tokenize(self, body):
        tt = tokenize(self._require_text(body))
        self._reply(200, {"tokens": list(tt.tokens), "n_real": tt.n_real})

    def _post_attention(self, body):
        tt = tokenize(self._require_text(body))
        w = embed(tt, self.state.provider)
        raw, att = self.state.text_encoder.attention(w, tt.n_real)
        self._reply(
            200,
            {
                "tokens": list(tt.tokens),
                "n_real": tt.n_real,
                "raw": raw[: tt.n_real].tolist(),
                "attention": att.tolist(),
            },
        )

    def _post_generate(self, body):
        claimed = body.get("config_hash")
        if claimed is not None and claimed != self.state.config_hash:
            self._fail(
                409,
                "config-mismatch",
                f"server artifacts carry config {self.state.config_hash}",
            )
            return
        override = body.get("attention_override")
        if override is not None:
            try:
                override = tuple((int(i), float(w)) for i, w in override)
            except (TypeError, ValueError):
                raise _BadRequest(
                    "validation", "attention_override must be [[index, weight], ...]"
                ) from None
        request = GenerationRequest(
            text=self._require_text(body),
            attention_override=override,
            target_duration_s=body.get("target_duration_s"),
            seed=int(body.get("seed", 0)),
            k_neighbors=int(body.get("k", DEFAULT_NEIGHBORS)),
        )
        triple = (
            self.state.text_encoder,
            self.state.gesture_encoder,
            self.state.config_hash,
        )
        motion, diagnostics = generate(
            request, triple, self.state.library, self.state.provider
        )
        for d in diagnostics:
            self.state.record_text(" ".join(d.tokens), d.f_t)
        self._reply(
            200,
            {
                "motion": clip_to_dict(motion),
                "diagnostics": [d.to_doc() for d in diagnostics],
                "config_hash": self.state.config_hash,
            },
        )

    def _get_library_clip(self, clip_id):
        try:
            clip = self.state.library.load_clip(clip_id)
        except LibraryError as e:
            self._fail(404, "not-found", str(e))
            return
        self._reply(200, clip_to_dict(clip))

    def _get_space(self, query):
        dims = query.get("dims", ["2"])[0]
        if dims != "2":
            raise _BadRequest("validation", f"only dims=2 is supported, got {dims}")
        q = self.state.projection()
        gestures = [
            {
                "clip_id": e.clip_id,
                "xy": (e.f_g @ q).tolist(),
                "cluster": e.cluster,
            }
            for e in self.state.library.entries
        ]
        texts = [
            {"text": label, "xy": (f_t @ q).tolist()}
            for label, f_t in self.state.recent_texts()
        ]
        self._reply(200, {"dims": 2, "gestures": gestures, "texts": texts})


class _BadRequest(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code
        self.message = message


def make_server(state, port=0):
    """Bind a threading server; port 0 picks an ephemeral port."""
    handler = type("BoundHandler", (_Handler,), {"state": state})
    return ThreadingHTTPServer(("127.0.0.1", port), handler)


def pick_port(explicit=None):
    if explicit is not None:
        return int(explicit)
    return int(os.environ.get(PORT_ENV, DEFAULT_PORT))


def serve(state, port=None, ready=None):
    server = make_server(state, pick_port(port))
    if ready is not None:
        ready(server)
    try:
        server.serve_forever()
    finally:
        server.server_close()
