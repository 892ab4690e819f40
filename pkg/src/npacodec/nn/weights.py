"""Model configuration, parameter layout and the NPAW weights file.

File layout (all integers little-endian u32)::

    b"NPAW" | version | d | k | heads | cph | stages |
    repeated until EOF:
        name_len | name (UTF-8) | rank | dims[rank] | float32 data (C order)

The model hash is the SHA-256 of everything after the version field.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import MalformedFile, ShapeError

MAGIC = b"NPAW"
VERSION = 1
STAGES = 8


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    k: int = 16
    heads: int = 4
    cph: int = 8
    stages: int = STAGES

    def __post_init__(self):
        if min(self.d, self.k, self.heads, self.cph) < 1:
            raise ValueError("model dimensions must be positive")
        if self.stages != STAGES:
            raise ValueError(f"stage count must be {STAGES}")

    @property
    def de(self) -> int:
        return self.heads * self.cph

    @property
    def ffn_hidden(self) -> int:
        return 2 * self.d


def _former_shapes(prefix, d, de):
    return {
        f"{prefix}.norm1.scale": ((d,), "ones"),
        f"{prefix}.norm1.shift": ((d,), "zeros"),
        f"{prefix}.npa.wq.matrix": ((de, d), "xavier"),
        f"{prefix}.npa.wq.bias": ((de,), "zeros"),
        f"{prefix}.npa.wk.matrix": ((de, d + 3), "xavier"),
        f"{prefix}.npa.wk.bias": ((de,), "zeros"),
        f"{prefix}.npa.wv.matrix": ((de, d + 3), "xavier"),
        f"{prefix}.npa.wv.bias": ((de,), "zeros"),
        f"{prefix}.npa.out.matrix": ((d, de), "xavier"),
        f"{prefix}.npa.out.bias": ((d,), "zeros"),
        f"{prefix}.norm2.scale": ((d,), "ones"),
        f"{prefix}.norm2.shift": ((d,), "zeros"),
        f"{prefix}.ffn1.matrix": ((2 * d, d), "xavier"),
        f"{prefix}.ffn1.bias": ((2 * d,), "zeros"),
        f"{prefix}.ffn2.matrix": ((d, 2 * d), "xavier"),
        f"{prefix}.ffn2.bias": ((d,), "zeros"),
    }


def _conv_shapes(prefix, d_out, d_in, volume=27):
    return {
        f"{prefix}.kernel": ((volume, d_out, d_in), "xavier"),
        f"{prefix}.bias": ((d_out,), "zeros"),
    }


def param_shapes(cfg: ModelConfig) -> dict:
    """Ordered name -> (shape, init kind) for every learnable tensor."""
    d, de = cfg.d, cfg.de
    shapes = {}
    shapes.update(_conv_shapes("agg.conv1", d, 1))
    shapes.update(_conv_shapes("agg.conv2", d, d))
    shapes.update(_former_shapes("agg.former", d, de))
    shapes.update(_conv_shapes("tsconv", d, d, volume=1))
    shapes["octant_embed"] = ((8, d), "xavier")
    shapes["occupancy_embed"] = ((2, d), "xavier")
    for g in range(cfg.stages):
        shapes.update(_former_shapes(f"stage{g}.former", d, de))
        shapes.update(_conv_shapes(f"stage{g}.conv1", d, d))
        shapes.update(_conv_shapes(f"stage{g}.conv2", 1, d))
    return shapes


def _fans(shape):
    if len(shape) == 3:
        return shape[0] * shape[2], shape[0] * shape[1]
    return shape[1], shape[0]


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> dict:
    """Glorot-uniform matrices, zero biases, unit norm scales."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, (shape, kind) in param_shapes(cfg).items():
        if kind == "zeros":
            a = np.zeros(shape)
        elif kind == "ones":
            a = np.ones(shape)
        else:
            fan_in, fan_out = _fans(shape)
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            a = rng.uniform(-lim, lim, size=shape)
        params[name] = a.astype(dtype)
    return params


@dataclass
class ModelWeights:
    config: ModelConfig
    params: dict = field(repr=False)

    @classmethod
    def random(cls, config: ModelConfig | None = None, seed: int = 0, dtype=np.float64):
        config = config or ModelConfig()
        return cls(config, init_params(config, seed, dtype))

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ShapeError(f"parameter set mismatch: missing {missing}, extra {extra}")
        for name, (shape, _) in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights(self.config, {n: a.astype(dtype) for n, a in self.params.items()})

    def _payload(self) -> bytes:
        c = self.config
        buf = io.BytesIO()
        buf.write(struct.pack("<5I", c.d, c.k, c.heads, c.cph, c.stages))
        for name in param_shapes(c):
            a = np.ascontiguousarray(self.params[name], dtype="<f4")
            raw = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", a.ndim))
            buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
            buf.write(a.tobytes())
        return buf.getvalue()

    def to_bytes(self) -> bytes:
        return MAGIC + struct.pack("<I", VERSION) + self._payload()

    @property
    def hash(self) -> bytes:
        return hashlib.sha256(self._payload()).digest()

    @classmethod
    def from_bytes(cls, data: bytes, dtype=np.float32) -> "ModelWeights":
        if len(data) < 28 or data[:4] != MAGIC:
            raise MalformedFile("not an NPAW weights file")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != VERSION:
            raise MalformedFile(f"unsupported weights version {version}")
        d, k, heads, cph, stages = struct.unpack_from("<5I", data, 8)
        try:
            config = ModelConfig(d, k, heads, cph, stages)
        except ValueError as exc:
            raise MalformedFile(f"bad model config: {exc}") from exc
        pos = 28
        params = {}
        try:
            while pos < len(data):
                (nlen,) = struct.unpack_from("<I", data, pos)
                pos += 4
                name = data[pos:pos + nlen].decode("utf-8")
                pos += nlen
                (rank,) = struct.unpack_from("<I", data, pos)
                pos += 4
                dims = struct.unpack_from(f"<{rank}I", data, pos)
                pos += 4 * rank
                count = int(np.prod(dims)) if rank else 1
                if pos + 4 * count > len(data):
                    raise MalformedFile(f"tensor {name} truncated")
                a = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
                params[name] = a.reshape(dims).astype(dtype)
                pos += 4 * count
        except (struct.error, UnicodeDecodeError) as exc:
            raise MalformedFile(f"corrupt weights file: {exc}") from exc
        try:
            return cls(config, params)
        except ShapeError as exc:
            raise MalformedFile(f"weights do not match config: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path, dtype=np.float32) -> "ModelWeights":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read(), dtype)
