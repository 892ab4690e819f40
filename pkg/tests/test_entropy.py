import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npacodec.entropy import (
    Bitstream, Header, RangeDecoder, RangeEncoder, geometry_crc, ideal_code_length,
    quantize_prob,
)
from npacodec.errors import MalformedHeader, StreamExhausted


def code(bits, p16):
    enc = RangeEncoder()
    enc.encode_bits(bits, p16)
    data = enc.finish()
    dec = RangeDecoder(data)
    back = dec.decode_bits(p16)
    return data, back, dec


def test_quantize_prob_examples():
    assert quantize_prob(0.5) == 32768
    assert quantize_prob(1e-9) == 1
    assert quantize_prob(1.0) == 65535
    assert quantize_prob(0.0) == 1
    # 0.123456 * 65536 = 8090.8... rounds to 8091
    assert quantize_prob(0.123456) == math.floor(0.123456 * 65536 + 0.5) == 8091
    assert quantize_prob(np.array([0.25, 0.75])).tolist() == [16384, 49152]
    with pytest.raises(ValueError):
        quantize_prob(float("nan"))


def test_uniform_bits_cost_one_bit_each(rng):
    bits = rng.integers(0, 2, 10_000)
    data, back, _ = code(bits, np.full(10_000, 32768))
    assert np.array_equal(back, bits)
    assert 1242 <= len(data) <= 1262


def test_certain_bits_are_nearly_free():
    bits = np.ones(1000, dtype=np.uint8)
    data, back, _ = code(bits, np.full(1000, 65535))
    assert np.all(back == 1)
    assert len(data) < 8


def test_random_sequence_near_entropy(rng):
    n = 100_000
    p16 = rng.integers(1, 65536, n)
    bits = (rng.random(n) < p16 / 65536).astype(np.uint8)
    data, back, dec = code(bits, p16)
    assert np.array_equal(back, bits)
    assert dec.bytes_consumed == len(data)
    assert abs(8 * len(data) - ideal_code_length(bits, p16)) < 64


def test_bit_by_bit_matches_batch(rng):
    bits = rng.integers(0, 2, 300)
    p16 = rng.integers(1, 65536, 300)
    enc = RangeEncoder()
    for b, p in zip(bits, p16):
        enc.encode_bit(int(b), int(p))
    data = enc.finish()
    batch, _, _ = code(bits, p16)
    assert data == batch
    dec = RangeDecoder(data)
    assert [dec.decode_bit(int(p)) for p in p16] == bits.tolist()


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(1, 65535)), min_size=0, max_size=400))
def test_round_trip_property(pairs):
    bits = np.array([b for b, _ in pairs], dtype=np.uint8)
    p16 = np.array([p for _, p in pairs], dtype=np.int64)
    data, back, _ = code(bits, p16)
    assert np.array_equal(back, bits)
    assert 8 * len(data) - ideal_code_length(bits, p16) < 64


def test_adversarial_probabilities(rng):
    # every bit is the unlikely outcome
    n = 20_000
    p16 = rng.choice([1, 2, 65534, 65535], n)
    bits = (p16 < 32768).astype(np.uint8)
    data, back, _ = code(bits, p16)
    assert np.array_equal(back, bits)
    assert 8 * len(data) - ideal_code_length(bits, p16) < 64


def test_decoder_underrun_raises():
    enc = RangeEncoder()
    enc.encode_bits(np.ones(64, dtype=np.uint8), np.full(64, 1))
    data = enc.finish()
    dec = RangeDecoder(data[: len(data) // 2])
    with pytest.raises(StreamExhausted):
        dec.decode_bits(np.full(64, 1))
    with pytest.raises(StreamExhausted):
        RangeDecoder(b"\x00")


def test_encoder_validates_probabilities():
    enc = RangeEncoder()
    with pytest.raises(ValueError):
        enc.encode_bits([1], [0])
    with pytest.raises(ValueError):
        enc.encode_bits([1], [65536])
    with pytest.raises(ValueError):
        enc.encode_bits([1, 0], [5])


def sample_header(base=None):
    base = np.array([[0, 0, 0], [3, 1, 2], [70000, 5, 1]]) if base is None else base
    return Header(
        k=16, scale_num=3, scale_den=7, offset=(-5, 0, 123456), source_count=1000,
        point_count=900, scale_count=11, base_points=base, model_hash=bytes(range(32)),
        geometry_crc=geometry_crc(base),
    )


def test_header_round_trip():
    bs = Bitstream(sample_header(), b"\x01\x02payload")
    back = Bitstream.from_bytes(bs.to_bytes())
    h, g = bs.header, back.header
    assert back.payload == bs.payload
    for field in ("k", "scale_num", "scale_den", "offset", "source_count", "point_count",
                  "scale_count", "model_hash", "geometry_crc", "version", "stage_plan"):
        assert getattr(g, field) == getattr(h, field)
    assert np.array_equal(g.base_points, h.base_points)
    assert bs.to_bytes()[:4] == b"NPCC"


def test_header_rejects_garbage():
    data = Bitstream(sample_header(), b"").to_bytes()
    with pytest.raises(MalformedHeader):
        Bitstream.from_bytes(b"NPCX" + data[4:])
    with pytest.raises(MalformedHeader):
        Bitstream.from_bytes(data[:4] + bytes([9]) + data[5:])
    with pytest.raises(MalformedHeader):
        Bitstream.from_bytes(data[:20])
