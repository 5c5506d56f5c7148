import numpy as np
import pytest

from meshtex_backend import protocol


def make_request(rng, **overrides):
    kwargs = dict(
        msg_type=protocol.MSG_PREDICT_NOISE,
        n=2, c=4, h=8, w=8,
        timestep=512.5, cfg_scale=7.5,
        flags=protocol.FLAG_STYLE_CONSISTENCY,
        seed=99, prompt="rusty metal",
        payload=rng.standard_normal(2 * 4 * 8 * 8 + 2 * 8 * 8).astype(np.float32),
    )
    kwargs.update(overrides)
    return protocol.Request(**kwargs)


def test_request_round_trip_bitwise(rng):
    req = make_request(rng)
    back = protocol.decode_request(protocol.encode_request(req))
    assert back.msg_type == req.msg_type
    assert (back.n, back.c, back.h, back.w) == (2, 4, 8, 8)
    assert back.timestep == np.float32(512.5)
    assert back.cfg_scale == np.float32(7.5)
    assert back.flags == req.flags and back.seed == 99
    assert back.prompt == "rusty metal"
    assert np.array_equal(back.payload, req.payload)
    assert np.array_equal(back.grids(), req.payload[: 2 * 4 * 8 * 8].reshape(2, 4, 8, 8))
    assert np.array_equal(back.extra(), req.payload[2 * 4 * 8 * 8 :])


def test_request_unicode_prompt(rng):
    req = make_request(rng, prompt="métal rouillé ☃")
    back = protocol.decode_request(protocol.encode_request(req))
    assert back.prompt == req.prompt
    assert np.array_equal(back.payload, req.payload)


def test_response_round_trip_bitwise(rng):
    payload = rng.standard_normal(3 * 4 * 4).astype(np.float32)
    resp = protocol.Response(protocol.STATUS_OK, 3, 1, 4, 4, payload)
    back = protocol.decode_response(protocol.encode_response(resp))
    assert back.status == protocol.STATUS_OK
    assert np.array_equal(back.payload, payload)
    assert back.grids().shape == (3, 1, 4, 4)


def test_bad_magic_raises(rng):
    data = bytearray(protocol.encode_request(make_request(rng)))
    data[:4] = b"NOPE"
    with pytest.raises(protocol.ProtocolError):
        protocol.decode_request(bytes(data))
    with pytest.raises(protocol.ProtocolError):
        protocol.decode_response(b"NOPE" + bytes(17))


def test_truncated_raises():
    with pytest.raises(protocol.ProtocolError):
        protocol.decode_request(b"GT")
    with pytest.raises(protocol.ProtocolError):
        protocol.decode_response(b"GTNP")


def test_short_payload_grid_access(rng):
    req = make_request(rng, payload=np.zeros(4, dtype=np.float32))
    with pytest.raises(protocol.ProtocolError):
        req.grids()
