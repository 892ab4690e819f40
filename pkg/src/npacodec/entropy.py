"""Binary range coder driven by external probabilities, and the NPCC container.

The coder is the classic carry-propagating byte-oriented range coder with a
32-bit range and a 33-bit low register. Probabilities are 16-bit integers
``p16`` giving P(bit = 1) = p16 / 65536, always in [1, 65535].

The first byte such a coder emits is always zero and is not stored; the
decoder assumes it.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import CorruptStream, MalformedHeader, StreamExhausted

PROB_BITS = 16
PROB_ONE = 1 << PROB_BITS
TOP = 1 << 24


def quantize_prob(p):
    """round(p * 65536), half away from zero, clamped to [1, 65535].

    Accepts a scalar or an array; returns int or int64 array.
    """
    a = np.asarray(p, dtype=np.float64)
    if np.any(np.isnan(a)):
        raise ValueError("probability is NaN")
    q = np.clip(np.floor(a * PROB_ONE + 0.5), 1, PROB_ONE - 1).astype(np.int64)
    return int(q) if q.ndim == 0 else q


@njit(cache=True)
def _shift_low(state, out, pos):
    low = state[0]
    if low < 0xFF000000 or low > 0xFFFFFFFF:
        carry = low >> 32
        temp = state[2]
        while True:
            out[pos] = (temp + carry) & 0xFF
            pos += 1
            temp = 0xFF
            state[3] -= 1
            if state[3] == 0:
                break
        state[2] = (low >> 24) & 0xFF
    state[3] += 1
    state[0] = (low & 0x00FFFFFF) << 8
    return pos


@njit(cache=True)
def _encode_batch(bits, probs, state, out, pos):
    for i in range(bits.shape[0]):
        rng = state[1]
        bound = (rng * probs[i]) >> 16
        if bits[i]:
            state[1] = bound
        else:
            state[0] += bound
            state[1] = rng - bound
        while state[1] < TOP:
            state[1] <<= 8
            pos = _shift_low(state, out, pos)
    return pos


@njit(cache=True)
def _flush(state, out, pos):
    for _ in range(5):
        pos = _shift_low(state, out, pos)
    return pos


@njit(cache=True)
def _decode_batch(probs, state, data, pos, bits):
    code = state[0]
    rng = state[1]
    n = data.shape[0]
    for i in range(probs.shape[0]):
        bound = (rng * probs[i]) >> 16
        if code < bound:
            bits[i] = 1
            rng = bound
        else:
            bits[i] = 0
            code -= bound
            rng -= bound
        while rng < TOP:
            if pos >= n:
                return -1
            code = ((code << 8) | data[pos]) & 0xFFFFFFFF
            pos += 1
            rng <<= 8
    state[0] = code
    state[1] = rng
    return pos


def _check_probs(p16):
    p = np.ascontiguousarray(p16, dtype=np.int64).ravel()
    if len(p) and (p.min() < 1 or p.max() > PROB_ONE - 1):
        raise ValueError("quantized probabilities must lie in [1, 65535]")
    return p


class RangeEncoder:
    def __init__(self):
        # low, range, cache, cache_size
        self._state = np.array([0, 0xFFFFFFFF, 0, 1], dtype=np.int64)
        self._buf = np.zeros(1024, dtype=np.uint8)
        self._pos = 0
        self.symbols = 0
        self._done = False

    def _reserve(self, n):
        need = self._pos + 2 * n + 16
        if need > len(self._buf):
            grown = np.zeros(max(need, 2 * len(self._buf)), dtype=np.uint8)
            grown[: self._pos] = self._buf[: self._pos]
            self._buf = grown

    def encode_bits(self, bits, p16) -> None:
        if self._done:
            raise RuntimeError("encoder already finished")
        b = np.ascontiguousarray(bits, dtype=np.uint8).ravel()
        p = _check_probs(p16)
        if len(b) != len(p):
            raise ValueError(f"{len(b)} bits but {len(p)} probabilities")
        self._reserve(len(b))
        self._pos = _encode_batch(b, p, self._state, self._buf, self._pos)
        self.symbols += len(b)

    def encode_bit(self, bit: int, p16: int) -> None:
        self.encode_bits([bit], [p16])

    def finish(self) -> bytes:
        if not self._done:
            self._reserve(0)
            self._pos = _flush(self._state, self._buf, self._pos)
            self._done = True
        return self._buf[1 : self._pos].tobytes()


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = np.frombuffer(bytes(data), dtype=np.uint8)
        if len(self._data) < 4:
            raise StreamExhausted("payload shorter than the coder preamble")
        code = int.from_bytes(bytes(self._data[:4]), "big")
        self._state = np.array([code, 0xFFFFFFFF], dtype=np.int64)
        self._pos = 4
        self.symbols = 0

    def decode_bits(self, p16) -> np.ndarray:
        p = _check_probs(p16)
        bits = np.zeros(len(p), dtype=np.uint8)
        pos = _decode_batch(p, self._state, self._data, self._pos, bits)
        if pos < 0:
            raise StreamExhausted("read past the end of the payload")
        self._pos = pos
        self.symbols += len(p)
        return bits

    def decode_bit(self, p16: int) -> int:
        return int(self.decode_bits([p16])[0])

    @property
    def bytes_consumed(self) -> int:
        return self._pos


def ideal_code_length(bits, p16) -> float:
    """Sum of -log2 P(coded bit) under the quantized probabilities."""
    b = np.asarray(bits).ravel().astype(bool)
    p = np.asarray(p16, dtype=np.float64).ravel() / PROB_ONE
    return float(-np.sum(np.log2(np.where(b, p, 1.0 - p))))


# -- container ---------------------------------------------------------------

MAGIC = b"NPCC"
VERSION = 1
STAGE_PLAN_ASCENDING = 1
HASH_BYTES = 32


def _put_varint(buf: bytearray, v: int) -> None:
    if v < 0:
        raise ValueError("varint must be non-negative")
    while True:
        b = v & 0x7F
        v >>= 7
        if v:
            buf.append(b | 0x80)
        else:
            buf.append(b)
            return


def _zigzag(v: int) -> int:
    return (v << 1) if v >= 0 else ((-v << 1) - 1)


def _unzigzag(u: int) -> int:
    return (u >> 1) if not u & 1 else -((u + 1) >> 1)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedHeader("bitstream header truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def varint(self) -> int:
        v = shift = 0
        while True:
            (b,) = self.take(1)
            v |= (b & 0x7F) << shift
            shift += 7
            if not b & 0x80:
                return v
            if shift > 70:
                raise MalformedHeader("varint too long")


@dataclass
class Header:
    k: int
    scale_num: int
    scale_den: int
    offset: tuple
    source_count: int
    point_count: int
    scale_count: int
    base_points: np.ndarray
    model_hash: bytes
    geometry_crc: int
    stage_plan: int = STAGE_PLAN_ASCENDING
    version: int = VERSION


@dataclass
class Bitstream:
    header: Header
    payload: bytes

    def to_bytes(self) -> bytes:
        h = self.header
        buf = bytearray(MAGIC)
        buf += bytes([h.version, h.stage_plan])
        for v in (h.k, h.scale_num, h.scale_den):
            _put_varint(buf, v)
        for v in h.offset:
            _put_varint(buf, _zigzag(int(v)))
        for v in (h.source_count, h.point_count, h.scale_count, len(h.base_points)):
            _put_varint(buf, v)
        prev = np.zeros(3, dtype=np.int64)
        for c in np.asarray(h.base_points, dtype=np.int64).reshape(-1, 3):
            for v in c - prev:
                _put_varint(buf, _zigzag(int(v)))
            prev = c
        if len(h.model_hash) != HASH_BYTES:
            raise ValueError("model hash must be 32 bytes")
        buf += h.model_hash
        buf += struct.pack("<I", h.geometry_crc)
        return bytes(buf) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        r = _Reader(bytes(data))
        if r.take(4) != MAGIC:
            raise MalformedHeader("not an NPCC bitstream")
        version, plan = r.take(2)
        if version != VERSION:
            raise MalformedHeader(f"unsupported bitstream version {version}")
        if plan != STAGE_PLAN_ASCENDING:
            raise MalformedHeader(f"unknown stage plan {plan}")
        k, num, den = r.varint(), r.varint(), r.varint()
        if k < 1 or num < 1 or den < 1:
            raise MalformedHeader("invalid k or scale factor")
        offset = tuple(_unzigzag(r.varint()) for _ in range(3))
        source_count, point_count, scale_count, base_count = (r.varint() for _ in range(4))
        base = np.zeros((base_count, 3), dtype=np.int64)
        prev = np.zeros(3, dtype=np.int64)
        for i in range(base_count):
            prev = prev + np.array([_unzigzag(r.varint()) for _ in range(3)])
            base[i] = prev
        model_hash = r.take(HASH_BYTES)
        (crc,) = struct.unpack("<I", r.take(4))
        header = Header(
            k, num, den, offset, source_count, point_count, scale_count,
            base, model_hash, crc, plan, version,
        )
        return cls(header, bytes(data[r.pos :]))


def geometry_crc(coords: np.ndarray) -> int:
    """CRC-32 of canonical-order coordinates as little-endian int64 triples."""
    return zlib.crc32(np.ascontiguousarray(coords, dtype="<i8").tobytes())


def check_crc(coords: np.ndarray, expected: int) -> None:
    if geometry_crc(coords) != expected:
        raise CorruptStream("decoded geometry fails the header checksum")
