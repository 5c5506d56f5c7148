"""TCP service: framing, request validation, and dispatch to the pipeline.

Connections are handled one at a time in arrival order; each connection may
carry any number of request/response exchanges. A malformed or unsupported
request produces an error-status response rather than a dropped connection
whenever a frame could be read at all.
"""

from __future__ import annotations

import http.server
import json
import logging
import socket
import threading

import numpy as np

from . import protocol
from .config import ServiceConfig
from .model import DOWNSAMPLE_FACTOR, LATENT_CHANNELS, StandInPipeline

log = logging.getLogger(__name__)


class Server:
    def __init__(self, config: ServiceConfig, pipeline: StandInPipeline | None = None):
        config.validate()
        self.config = config
        self.pipeline = pipeline or StandInPipeline()
        self._sock: socket.socket | None = None
        self._health: http.server.HTTPServer | None = None
        self._threads: list[threading.Thread] = []
        self._stopping = threading.Event()

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        """Bind both listeners and serve from background threads."""
        self._sock = socket.create_server(
            (self.config.host, self.config.port), reuse_port=False
        )
        self._sock.settimeout(0.2)
        self._health = _make_health_server(self.config)
        self._threads = [
            threading.Thread(target=self._accept_loop, daemon=True),
            threading.Thread(target=self._health.serve_forever, daemon=True),
        ]
        for t in self._threads:
            t.start()
        log.info(
            "serving on %s:%d (health on %d)",
            self.config.host, self.config.port, self.config.health_port,
        )

    def stop(self) -> None:
        self._stopping.set()
        if self._health is not None:
            self._health.shutdown()
        for t in self._threads:
            t.join(timeout=5.0)
        if self._sock is not None:
            self._sock.close()

    def serve_forever(self) -> None:
        self.start()
        try:
            while not self._stopping.wait(0.5):
                pass
        finally:
            self.stop()

    def _accept_loop(self) -> None:
        assert self._sock is not None
        while not self._stopping.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            with conn:
                self._serve_connection(conn)

    def _serve_connection(self, conn: socket.socket) -> None:
        while True:
            try:
                data = protocol.recv_frame(conn)
            except (protocol.ProtocolError, OSError):
                return
            try:
                resp = self.handle_bytes(data)
            except Exception:  # noqa: BLE001 - keep the service alive
                log.exception("unhandled error while serving a request")
                resp = protocol.error_response(protocol.STATUS_MODEL_ERROR)
            try:
                protocol.send_frame(conn, protocol.encode_response(resp))
            except OSError:
                return

    # -- dispatch ------------------------------------------------------------

    def handle_bytes(self, data: bytes) -> protocol.Response:
        try:
            req = protocol.decode_request(data)
        except protocol.ProtocolError:
            return protocol.error_response(protocol.STATUS_MALFORMED)
        return self.handle_request(req)

    def handle_request(self, req: protocol.Request) -> protocol.Response:
        if req.version != protocol.VERSION:
            return protocol.error_response(protocol.STATUS_UNSUPPORTED_VERSION)
        if req.n < 1 or min(req.c, req.h, req.w) < 1:
            return protocol.error_response(protocol.STATUS_MALFORMED)
        if req.n > self.config.max_batch:
            return protocol.error_response(protocol.STATUS_RETRY_SMALLER)
        handler = {
            protocol.MSG_PREDICT_NOISE: self._predict_noise,
            protocol.MSG_ENCODE: self._encode,
            protocol.MSG_DECODE: self._decode,
            protocol.MSG_INPAINT: self._inpaint,
            protocol.MSG_IMG2IMG: self._img2img,
        }.get(req.msg_type)
        if handler is None:
            return protocol.error_response(protocol.STATUS_MALFORMED)
        try:
            return handler(req)
        except (protocol.ProtocolError, ValueError):
            return protocol.error_response(protocol.STATUS_MALFORMED)
        except Exception:  # noqa: BLE001
            log.exception("model failure for msg_type %d", req.msg_type)
            return protocol.error_response(protocol.STATUS_MODEL_ERROR)

    def _predict_noise(self, req: protocol.Request) -> protocol.Response:
        if req.c != LATENT_CHANNELS:
            return protocol.error_response(protocol.STATUS_MALFORMED)
        grids = req.grids()
        depths = req.extra()
        if len(depths) != req.n * req.h * req.w:
            return protocol.error_response(protocol.STATUS_MALFORMED)
        eps = self.pipeline.predict_noise(
            grids,
            depths.reshape(req.n, req.h, req.w),
            req.timestep,
            req.prompt,
            req.cfg_scale,
            req.style_consistency,
            guess_mode=self.config.guess_mode,
        )
        return _grid_response(eps)

    def _encode(self, req: protocol.Request) -> protocol.Response:
        if req.n != 1 or req.c != 3:
            return protocol.error_response(protocol.STATUS_MALFORMED)
        return _grid_response(self.pipeline.encode(req.grids()))

    def _decode(self, req: protocol.Request) -> protocol.Response:
        if req.c != LATENT_CHANNELS:
            return protocol.error_response(protocol.STATUS_MALFORMED)
        return _grid_response(self.pipeline.decode(req.grids(), req.style_consistency))

    def _inpaint(self, req: protocol.Request) -> protocol.Response:
        if req.n != 1 or req.c != 3:
            return protocol.error_response(protocol.STATUS_MALFORMED)
        if not (req.flags & protocol.FLAG_MASK):
            return protocol.error_response(protocol.STATUS_MALFORMED)
        extra = req.extra()
        plane = req.h * req.w
        if len(extra) != 2 * plane:
            return protocol.error_response(protocol.STATUS_MALFORMED)
        mask = extra[:plane].reshape(req.h, req.w)
        depth = extra[plane:].reshape(req.h, req.w)
        out = self.pipeline.inpaint(
            req.grids()[0], mask, depth, req.prompt, req.cfg_scale, req.seed
        )
        return _grid_response(out[None])

    def _img2img(self, req: protocol.Request) -> protocol.Response:
        if req.n != 1 or req.c != LATENT_CHANNELS:
            return protocol.error_response(protocol.STATUS_MALFORMED)
        extra = req.extra()
        if len(extra) != req.h * req.w:
            return protocol.error_response(protocol.STATUS_MALFORMED)
        out = self.pipeline.img2img(
            req.grids()[0],
            extra.reshape(req.h, req.w),
            req.prompt,
            req.timestep,  # the strength rides in the timestep field
            req.cfg_scale,
            req.style_consistency,
        )
        return _grid_response(out[None])


def _grid_response(grids: np.ndarray) -> protocol.Response:
    n, c, h, w = grids.shape
    return protocol.Response(
        protocol.STATUS_OK, n, c, h, w, grids.astype("<f4").ravel()
    )


def _make_health_server(config: ServiceConfig) -> http.server.HTTPServer:
    body = json.dumps(
        {
            "status": "ok",
            "model_id": config.model_id,
            "control_id": config.control_id,
            "protocol_version": protocol.VERSION,
            "max_batch": config.max_batch,
            "latent_factor": DOWNSAMPLE_FACTOR,
        }
    ).encode()

    class Handler(http.server.BaseHTTPRequestHandler):
        def do_GET(self):  # noqa: N802 - http.server API
            if self.path not in ("/", "/health"):
                self.send_error(404)
                return
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, *args):  # quiet
            pass

    return http.server.HTTPServer((config.host, config.health_port), Handler)
