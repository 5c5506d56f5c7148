"""Server-side implementation of the GTNP wire protocol.

Kept independent of the engine package on purpose: the protocol is the only
contract between the two components. Framing is a u32 little-endian length
prefix; request and response layouts are documented field by field below.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"GTNP"
VERSION = 1

MSG_PREDICT_NOISE = 1
MSG_ENCODE = 2
MSG_DECODE = 3
MSG_INPAINT = 4
MSG_IMG2IMG = 5

FLAG_STYLE_CONSISTENCY = 1
FLAG_MASK = 2
FLAG_REFERENCE = 4

STATUS_OK = 0
STATUS_MALFORMED = 1
STATUS_UNSUPPORTED_VERSION = 2
STATUS_MODEL_ERROR = 3
STATUS_RETRY_SMALLER = 4

# magic, version, msg_type, N, C, H, W, timestep, cfg_scale, flags, seed,
# prompt byte length
_REQ_HEADER = struct.Struct("<4sHBIIIIffBQI")
# magic, status, N, C, H, W
_RESP_HEADER = struct.Struct("<4sBIIII")


class ProtocolError(RuntimeError):
    pass


@dataclass
class Request:
    msg_type: int
    n: int
    c: int
    h: int
    w: int
    timestep: float
    cfg_scale: float
    flags: int
    seed: int
    prompt: str
    payload: np.ndarray  # flat f32; leading N*C*H*W values are the grids
    version: int = VERSION

    @property
    def style_consistency(self) -> bool:
        return bool(self.flags & FLAG_STYLE_CONSISTENCY)

    def grids(self) -> np.ndarray:
        count = self.n * self.c * self.h * self.w
        if len(self.payload) < count:
            raise ProtocolError("payload shorter than the declared grid block")
        return self.payload[:count].reshape(self.n, self.c, self.h, self.w)

    def extra(self) -> np.ndarray:
        return self.payload[self.n * self.c * self.h * self.w :]


@dataclass
class Response:
    status: int
    n: int
    c: int
    h: int
    w: int
    payload: np.ndarray

    def grids(self) -> np.ndarray:
        count = self.n * self.c * self.h * self.w
        if len(self.payload) < count:
            raise ProtocolError("payload shorter than the declared grid block")
        return self.payload[:count].reshape(self.n, self.c, self.h, self.w)


def decode_request(data: bytes) -> Request:
    if len(data) < _REQ_HEADER.size:
        raise ProtocolError("truncated request header")
    magic, version, msg_type, n, c, h, w, timestep, cfg, flags, seed, plen = (
        _REQ_HEADER.unpack_from(data)
    )
    if magic != MAGIC:
        raise ProtocolError("bad magic")
    off = _REQ_HEADER.size
    if len(data) < off + plen:
        raise ProtocolError("truncated prompt")
    prompt = data[off : off + plen].decode("utf-8")
    body = data[off + plen :]
    if len(body) % 4:
        raise ProtocolError("payload length not a multiple of 4")
    payload = np.frombuffer(body, dtype="<f4").copy()
    return Request(msg_type, n, c, h, w, timestep, cfg, flags, seed, prompt, payload, version)


def encode_request(req: Request) -> bytes:
    prompt = req.prompt.encode("utf-8")
    header = _REQ_HEADER.pack(
        MAGIC, req.version, req.msg_type, req.n, req.c, req.h, req.w,
        req.timestep, req.cfg_scale, req.flags, req.seed, len(prompt),
    )
    return header + prompt + np.ascontiguousarray(req.payload, dtype="<f4").tobytes()


def encode_response(resp: Response) -> bytes:
    header = _RESP_HEADER.pack(MAGIC, resp.status, resp.n, resp.c, resp.h, resp.w)
    return header + np.ascontiguousarray(resp.payload, dtype="<f4").tobytes()


def decode_response(data: bytes) -> Response:
    if len(data) < _RESP_HEADER.size:
        raise ProtocolError("truncated response header")
    magic, status, n, c, h, w = _RESP_HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ProtocolError("bad magic")
    payload = np.frombuffer(data[_RESP_HEADER.size :], dtype="<f4").copy()
    return Response(status, n, c, h, w, payload)


def error_response(status: int) -> Response:
    return Response(status, 0, 0, 0, 0, np.zeros(0, dtype=np.float32))


def send_frame(sock: socket.socket, data: bytes) -> None:
    sock.sendall(struct.pack("<I", len(data)) + data)


def recv_frame(sock: socket.socket) -> bytes:
    (length,) = struct.unpack("<I", _recv_exact(sock, 4))
    return _recv_exact(sock, length)


def _recv_exact(sock: socket.socket, count: int) -> bytes:
    chunks = []
    got = 0
    while got < count:
        chunk = sock.recv(count - got)
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)
