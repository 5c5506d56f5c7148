"""Binary wire protocol shared by the engine and the predictor service.

Messages are length-prefixed (u32 little-endian) blobs. A request is:

    header {magic "GTNP", u16 version, u8 msg_type, u32 N, u32 C, u32 H,
            u32 W, f32 timestep, f32 cfg_scale, u8 flags, u64 seed,
            u32 prompt_len}
    + UTF-8 prompt
    + payload: N*C*H*W little-endian f32 values, followed by any extra
      planes the message type defines (depths, masks).

A response is {magic, u8 status, u32 N, u32 C, u32 H, u32 W} + payload.
The low flag bit carries style consistency; higher bits mark the optional
mask and embedded-reference payloads of the refinement messages.
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

_REQ_HEADER = struct.Struct("<4sHBIIIIffBQI")
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
    payload: np.ndarray  # flat f32

    def grids(self) -> np.ndarray:
        return self.payload[: self.n * self.c * self.h * self.w].reshape(
            self.n, self.c, self.h, self.w
        )


def encode_request(req: Request) -> bytes:
    prompt = req.prompt.encode("utf-8")
    header = _REQ_HEADER.pack(
        MAGIC,
        req.version,
        req.msg_type,
        req.n,
        req.c,
        req.h,
        req.w,
        req.timestep,
        req.cfg_scale,
        req.flags,
        req.seed,
        len(prompt),
    )
    return header + prompt + np.ascontiguousarray(req.payload, dtype="<f4").tobytes()


def decode_request(data: bytes) -> Request:
    if len(data) < _REQ_HEADER.size:
        raise ProtocolError("truncated request header")
    (magic, version, msg_type, n, c, h, w, timestep, cfg, flags, seed, plen) = (
        _REQ_HEADER.unpack_from(data)
    )
    if magic != MAGIC:
        raise ProtocolError("bad magic")
    off = _REQ_HEADER.size
    prompt = data[off : off + plen].decode("utf-8")
    payload = np.frombuffer(data[off + plen :], dtype="<f4").copy()
    return Request(msg_type, n, c, h, w, timestep, cfg, flags, seed, prompt, payload, version)


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


def send_frame(sock: socket.socket, data: bytes) -> None:
    sock.sendall(struct.pack("<I", len(data)) + data)


def recv_frame(sock: socket.socket) -> bytes:
    raw_len = _recv_exact(sock, 4)
    (length,) = struct.unpack("<I", raw_len)
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


def roundtrip(endpoint: str, request: Request, timeout: float = 120.0) -> Response:
    """One request/response exchange with a service at host:port."""
    host, _, port = endpoint.rpartition(":")
    with socket.create_connection((host or "127.0.0.1", int(port)), timeout=timeout) as sock:
        send_frame(sock, encode_request(request))
        return decode_response(recv_frame(sock))
