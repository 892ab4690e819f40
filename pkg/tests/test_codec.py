from fractions import Fraction

import numpy as np
import pytest
from scipy.spatial import cKDTree

from npacodec import synthetic
from npacodec.codec import (
    CodecConfig, bits_per_point, build_pyramid, decode, encode, quantize_depth, quantize_mm,
    scale_coords, unscale_coords,
)
from npacodec.entropy import Bitstream
from npacodec.errors import (
    CodecError, CorruptStream, EmptyInput, ModelMismatch, OverflowCoordinate,
)
from npacodec.mopa import UniformPredictor
from npacodec.nn.weights import ModelConfig, ModelWeights
from npacodec.sparse_tensor import lex_unique


@pytest.fixture(scope="module")
def weights():
    return ModelWeights.random(ModelConfig(), seed=2, dtype=np.float32)


def as_set(c):
    return {tuple(r) for r in np.asarray(c).tolist()}


def test_one_point_is_header_only(weights):
    bs = encode([[5, -3, 9]], model=weights)
    assert bs.header.scale_count == 0
    assert bs.payload == b""
    out = decode(bs.to_bytes(), model=weights)
    assert out.coords.tolist() == [[5, -3, 9]]


def test_full_octant_threshold_one(weights):
    cube = [[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)]
    bs = encode(np.array(cube) + 10, CodecConfig(base_scale_threshold=1), weights)
    assert bs.header.scale_count == 1
    assert len(bs.header.base_points) == 1
    assert len(bs.payload) > 0
    out = decode(bs.to_bytes(), CodecConfig(base_scale_threshold=1), weights)
    assert as_set(out.coords) == as_set(np.array(cube) + 10)


def test_pyramid_depth():
    coords = np.array([[0, 0, 0], [1023, 0, 0]])
    levels = build_pyramid(coords, threshold=1)
    assert [len(t) for t in levels] == [2] * 10 + [1]


@pytest.mark.parametrize("seed,n", [(0, 1000), (1, 5000), (2, 50_000)])
def test_lossless_round_trip(weights, seed, n):
    rng = np.random.default_rng(seed)
    c = synthetic.random_cloud(rng, n)
    data = encode(c, model=weights).to_bytes()
    out = decode(data, model=weights)
    assert np.array_equal(out.coords, lex_unique(c))
    assert np.array_equal(out.points, out.coords)


def test_round_trip_uniform_random_points(weights):
    rng = np.random.default_rng(3)
    c = rng.integers(-1000, 1000, size=(2000, 3))
    out = decode(encode(c, model=weights).to_bytes(), model=weights)
    assert as_set(out.coords) == as_set(c)


def test_duplicates_are_merged_but_counted(weights):
    c = np.array([[1, 1, 1], [1, 1, 1], [4, 0, 2]])
    bs = encode(c, model=weights)
    assert bs.header.source_count == 3
    assert bs.header.point_count == 2


def test_uniform_predictor_codec():
    rng = np.random.default_rng(4)
    c = synthetic.random_cloud(rng, 3000)
    model = UniformPredictor(0.5)
    out = decode(encode(c, model=model).to_bytes(), model=model)
    assert np.array_equal(out.coords, lex_unique(c))


def test_empty_and_overflow_inputs(weights):
    with pytest.raises(EmptyInput):
        encode(np.zeros((0, 3)), model=weights)
    with pytest.raises(OverflowCoordinate):
        encode([[2**31, 0, 0]], model=weights)


def test_model_mismatch(weights):
    data = encode(np.arange(300).reshape(100, 3), model=weights).to_bytes()
    other = ModelWeights.random(ModelConfig(), seed=3, dtype=np.float32)
    with pytest.raises(ModelMismatch):
        decode(data, model=other)


def test_flipped_payload_bytes_never_pass_silently(weights):
    rng = np.random.default_rng(5)
    c = synthetic.random_cloud(rng, 2000)
    bs = encode(c, model=weights)
    data = bytearray(bs.to_bytes())
    head = len(data) - len(bs.payload)
    for pos in rng.choice(np.arange(head, len(data)), size=12, replace=False):
        bad = bytearray(data)
        bad[pos] ^= 1 << int(rng.integers(8))
        with pytest.raises(CodecError):
            decode(bytes(bad), model=weights)


def test_truncated_stream_raises(weights):
    c = synthetic.random_cloud(np.random.default_rng(6), 1500)
    data = encode(c, model=weights).to_bytes()
    with pytest.raises(CodecError):
        decode(data[:-7], model=weights)
    with pytest.raises(CodecError):
        decode(data[:30], model=weights)


def test_header_point_count_tampering(weights):
    c = synthetic.random_cloud(np.random.default_rng(7), 500)
    bs = encode(c, model=weights)
    bs.header.point_count += 1
    with pytest.raises(CorruptStream):
        decode(Bitstream.from_bytes(bs.to_bytes()), model=weights)


# -- lossy mode --------------------------------------------------------------------


@pytest.mark.parametrize("scale", [Fraction(1, 2), Fraction(1, 3), Fraction(2, 5), Fraction(1, 8)])
def test_lossy_reconstruction_bound(weights, scale):
    rng = np.random.default_rng(8)
    c = lex_unique(synthetic.random_cloud(rng, 4000, extent=4096))
    out = decode(encode(c, CodecConfig(scale=scale), weights).to_bytes(), model=weights)
    assert np.array_equal(out.coords, scale_coords(c, scale))
    bound = -(-scale.denominator // (2 * scale.numerator))
    # L-inf distance from every reconstructed point to the nearest input point
    dist, _ = cKDTree(c).query(out.points, p=np.inf)
    assert dist.max() <= bound
    expected = {tuple(_restore(p, scale)) for p in c.tolist()}
    assert as_set(out.points) == expected


def _restore(p, s):
    """round(round(p * s) / s) for one point, in exact rational arithmetic."""
    q = [_round_half_away(Fraction(v) * s) for v in p]
    return [_round_half_away(Fraction(v) / s) for v in q]


def _round_half_away(f):
    mag = (abs(f) * 2 + 1) // 2
    return int(mag if f >= 0 else -mag)


def test_scale_coords_rounding():
    c = np.array([[1, 3, -3], [5, -5, 0]])
    assert scale_coords(c, Fraction(1, 2)).tolist() == [[1, 2, -2], [3, -3, 0]]
    assert unscale_coords(np.array([[1, -1, 0]]), Fraction(2, 3)).tolist() == [[2, -2, 0]]


# -- quantization ------------------------------------------------------------------


def test_quantize_mm_examples():
    assert quantize_mm([[0.0012, 0, 0]], 0.001)[0, 0] == 1
    assert quantize_mm([[-0.0015, 0, 0]], 0.001)[0, 0] == -2
    assert quantize_mm([[0.0025, -0.0025, 0.0]], 0.001).tolist() == [[3, -3, 0]]
    with pytest.raises(ValueError):
        quantize_mm([[0, 0, 0]], 0)


def test_quantize_mm_matches_scalar_oracle(rng):
    p = rng.uniform(-50, 50, size=(500, 3))
    prec = 0.037
    expected = [[int(np.sign(v / prec) * np.floor(abs(v / prec) + 0.5)) for v in row] for row in p]
    assert quantize_mm(p, prec).tolist() == expected


def test_quantize_depth_examples(rng):
    p = rng.uniform(-1, 1, size=(2000, 3))
    q, offset, step = quantize_depth(p, 8)
    assert step == 2 / 255
    assert q.min() >= 0 and q.max() <= 255
    assert np.array_equal(offset, p.min(axis=0))
    q0, _, _ = quantize_depth(np.array([[0.3, -0.2, 0.9]]), 8)
    assert q0.tolist() == [[0, 0, 0]]


def test_quantize_depth_ten_matches_oracle(rng):
    p = rng.uniform(-1, 1, size=(500, 3))
    q, offset, step = quantize_depth(p, 10)
    assert q.min() >= 0 and q.max() <= 1023
    for row, got in zip(p, q):
        for v, o, g in zip(row, offset, got):
            assert g == int(np.floor((v - o) / (2 / 1023) + 0.5))


def test_bits_per_point():
    assert bits_per_point(b"x" * 10, 40) == 2.0


def test_config_validation():
    with pytest.raises(ValueError):
        CodecConfig(scale=Fraction(3, 2))
    with pytest.raises(ValueError):
        CodecConfig(heads=2, cph=8)
    CodecConfig(heads=2, cph=8, allow_any_width=True)
    with pytest.raises(ValueError):
        CodecConfig(base_scale_threshold=0)
