"""Byte-level protocol for remote guidance backends, an HTTP client and a reference server.

Noise-prediction request (little-endian)::

    b"AVBQ" u32 version u32 ndim u32 dims[ndim] u32 t f32 guidance_scale
    u32 n + model_id utf-8, u32 n + prompt utf-8, u32 n + condition PNG bytes (n=0: none)
    f32 latent[prod(dims)]

Response::

    b"AVBR" u32 version u32 status
    status == 0: u32 ndim u32 dims[ndim] f32 epsilon[prod(dims)]
    status != 0: u32 n + error message utf-8

Fine-tuning and generation use JSON bodies with base64 PNGs (``/v1/finetune``,
``/v1/generate``); ``GET /v1/health`` answers ``{"ok": true}``.
"""
import base64
import io
import json
import struct
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

import numpy as np
from PIL import Image

from .exceptions import BackendError, ContractError
from .guidance import GuidanceBackend

REQUEST_MAGIC = b"AVBQ"
RESPONSE_MAGIC = b"AVBR"
WIRE_VERSION = 1
ENDPOINT_ENV = "AVATARFORGE_BACKEND_ENDPOINT"


def png_bytes(image):
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def png_decode(data):
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


@dataclass
class NoiseRequest:
    latent: np.ndarray
    t: int
    prompt: str
    guidance_scale: float = 1.0
    condition_png: bytes = b""
    model_id: str = "base"


def _pack_str(b):
    return struct.pack("<I", len(b)) + b


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ContractError("truncated payload")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def f32(self):
        return struct.unpack("<f", self.take(4))[0]

    def blob(self):
        return self.take(self.u32())

    def array(self):
        ndim = self.u32()
        shape = tuple(self.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)


def _pack_array(arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return (struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())


def encode_request(req):
    lat = np.ascontiguousarray(req.latent, dtype="<f4")
    head = (REQUEST_MAGIC + struct.pack("<II", WIRE_VERSION, lat.ndim)
            + struct.pack(f"<{lat.ndim}I", *lat.shape) + struct.pack("<If", int(req.t), float(req.guidance_scale)))
    return (head + _pack_str(req.model_id.encode()) + _pack_str(req.prompt.encode())
            + _pack_str(req.condition_png) + lat.tobytes())


def decode_request(data):
    r = _Reader(data)
    if r.take(4) != REQUEST_MAGIC:
        raise ContractError("bad request magic")
    version = r.u32()
    if version != WIRE_VERSION:
        raise ContractError(f"unsupported wire version {version}")
    ndim = r.u32()
    shape = tuple(r.u32() for _ in range(ndim))
    t = r.u32()
    gs = r.f32()
    model_id = r.blob().decode()
    prompt = r.blob().decode()
    cond = r.blob()
    count = int(np.prod(shape))
    lat = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(data):
        raise ContractError("trailing bytes in request")
    return NoiseRequest(lat, t, prompt, gs, cond, model_id)


def encode_response(epsilon=None, error=None):
    head = RESPONSE_MAGIC + struct.pack("<I", WIRE_VERSION)
    if error is not None:
        return head + struct.pack("<I", 1) + _pack_str(str(error).encode())
    return head + struct.pack("<I", 0) + _pack_array(epsilon)


def decode_response(data):
    r = _Reader(data)
    if r.take(4) != RESPONSE_MAGIC:
        raise BackendError("bad response magic")
    version = r.u32()
    if version != WIRE_VERSION:
        raise BackendError(f"unsupported wire version {version}")
    if r.u32() != 0:
        raise BackendError(f"remote backend error: {r.blob().decode(errors='replace')}")
    return r.array()


class HttpBackend(GuidanceBackend):
    """Client for a remote backend speaking the protocol above."""

    def __init__(self, endpoint, model_id="base", timeout=60.0):
        self.endpoint = endpoint.rstrip("/")
        self.model_id = model_id
        self.timeout = timeout
        self.name = f"http:{model_id}"

    def _post(self, route, body, content_type):
        req = urllib.request.Request(f"{self.endpoint}{route}", data=body, method="POST",
                                     headers={"Content-Type": content_type})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.read()
        except urllib.error.HTTPError as exc:
            payload = exc.read()
            if payload.startswith(RESPONSE_MAGIC):
                decode_response(payload)
            raise BackendError(f"{route}: HTTP {exc.code}") from exc
        except (urllib.error.URLError, OSError) as exc:
            raise BackendError(f"{route}: {exc}") from exc

    def _json(self, route, obj):
        return json.loads(self._post(route, json.dumps(obj).encode(), "application/json"))

    def predict_noise(self, z_t, t, prompt, condition=None, guidance_scale=1.0):
        z_t = np.asarray(z_t)
        req = NoiseRequest(z_t, int(t), prompt, guidance_scale,
                           b"" if condition is None else png_bytes(condition), self.model_id)
        eps = decode_response(self._post("/v1/predict_noise", encode_request(req),
                                         "application/octet-stream"))
        if eps.shape != z_t.shape:
            raise BackendError(f"remote returned shape {eps.shape} for latent {z_t.shape}")
        return eps.astype(np.float64)

    def finetune(self, dataset, steps):
        items = [{"image_png": base64.b64encode(png_bytes(img)).decode(), "caption": cap}
                 for img, cap in dataset]
        out = self._json("/v1/finetune", {"model_id": self.model_id, "steps": int(steps), "dataset": items})
        return HttpBackend(self.endpoint, out["model_id"], self.timeout)

    def generate(self, prompt, condition, rng):
        body = {"model_id": self.model_id, "prompt": prompt, "seed": int(rng.integers(0, 2**31 - 1)),
                "condition_png": None if condition is None else base64.b64encode(png_bytes(condition)).decode()}
        return png_decode(base64.b64decode(self._json("/v1/generate", body)["image_png"]))

    def health(self):
        try:
            with urllib.request.urlopen(f"{self.endpoint}/v1/health", timeout=self.timeout) as resp:
                return bool(json.loads(resp.read()).get("ok"))
        except (urllib.error.URLError, OSError, ValueError):
            return False


class BackendServer:
    """Serve an in-process backend over HTTP (reference implementation of the protocol)."""

    def __init__(self, backend, host="127.0.0.1", port=0):
        self.models = {"base": backend}
        self._lock = threading.Lock()
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _send(self, code, body, ctype):
                self.send_response(code)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                if self.path == "/v1/health":
                    self._send(200, b'{"ok": true}', "application/json")
                else:
                    self._send(404, b"{}", "application/json")

            def do_POST(self):
                body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                try:
                    if self.path == "/v1/predict_noise":
                        self._send(200, server._predict(body), "application/octet-stream")
                    elif self.path == "/v1/finetune":
                        self._send(200, json.dumps(server._finetune(json.loads(body))).encode(), "application/json")
                    elif self.path == "/v1/generate":
                        self._send(200, json.dumps(server._generate(json.loads(body))).encode(), "application/json")
                    else:
                        self._send(404, b"{}", "application/json")
                except Exception as exc:
                    if self.path == "/v1/predict_noise":
                        self._send(500, encode_response(error=exc), "application/octet-stream")
                    else:
                        self._send(500, json.dumps({"error": str(exc)}).encode(), "application/json")

        self.httpd = ThreadingHTTPServer((host, port), Handler)
        self._thread = None

    @property
    def endpoint(self):
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def _model(self, model_id):
        with self._lock:
            if model_id not in self.models:
                raise KeyError(f"unknown model {model_id!r}")
            return self.models[model_id]

    def _predict(self, body):
        req = decode_request(body)
        cond = png_decode(req.condition_png) if req.condition_png else None
        eps = self._model(req.model_id).predict_noise(req.latent.astype(np.float64), req.t, req.prompt,
                                                      cond, req.guidance_scale)
        return encode_response(np.asarray(eps, dtype=np.float32))

    def _finetune(self, obj):
        data = [(png_decode(base64.b64decode(it["image_png"])), it["caption"]) for it in obj["dataset"]]
        derived = self._model(obj["model_id"]).finetune(data, obj["steps"])
        with self._lock:
            new_id = f"{obj['model_id']}/ft{len(self.models)}"
            self.models[new_id] = derived
        return {"model_id": new_id}

    def _generate(self, obj):
        cond = obj.get("condition_png")
        cond = png_decode(base64.b64decode(cond)) if cond else None
        img = self._model(obj["model_id"]).generate(obj["prompt"], cond, np.random.default_rng(obj["seed"]))
        return {"image_png": base64.b64encode(png_bytes(img)).decode()}

    def start(self):
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
