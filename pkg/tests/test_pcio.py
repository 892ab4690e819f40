import struct

import numpy as np
import pytest

from npacodec.errors import CountMismatch, MalformedFile, MalformedHeader, UnsupportedEncoding
from npacodec.pcio import RawCloud, read_cloud, read_kitti_bin, read_ply, write_ply


def write(path, data):
    path.write_bytes(data)
    return path


def test_minimal_ascii(tmp_path):
    p = write(tmp_path / "one.ply", b"ply\nformat ascii 1.0\nelement vertex 1\n"
              b"property float x\nproperty float y\nproperty float z\nend_header\n1.5 -2 3e2\n")
    cloud = read_ply(p)
    assert cloud.points.tolist() == [[1.5, -2.0, 300.0]]
    assert cloud.source_format == "ply-ascii"


@pytest.mark.parametrize("binary", [False, True])
@pytest.mark.parametrize("dtype", ["double", "float"])
def test_write_read_round_trip(tmp_path, rng, binary, dtype):
    pts = rng.normal(0, 100, size=(257, 3))
    write_ply(RawCloud(pts), tmp_path / "c.ply", binary=binary, dtype=dtype)
    back = read_cloud(tmp_path / "c.ply").points
    expected = pts if dtype == "double" else pts.astype(np.float32).astype(np.float64)
    assert np.array_equal(back, expected)


def test_binary_fixture_with_extra_columns(tmp_path):
    # x y z as float, intensity as uchar between, a face element with a list afterwards
    head = (b"ply\nformat binary_little_endian 1.0\ncomment hand built\n"
            b"element vertex 3\nproperty float x\nproperty uchar intensity\n"
            b"property float y\nproperty float z\nproperty double extra\n"
            b"element face 1\nproperty list uchar int vertex_indices\nend_header\n")
    rows = [(1.0, 7, 2.0, 3.0, 9.5), (-4.0, 255, 5.5, 6.0, 0.0), (0.25, 0, 0.5, 0.75, -1.0)]
    body = b"".join(struct.pack("<fBffd", *r) for r in rows)
    body += struct.pack("<B3i", 3, 0, 1, 2)
    cloud = read_ply(write(tmp_path / "fx.ply", head + body))
    assert cloud.points.tolist() == [[1.0, 2.0, 3.0], [-4.0, 5.5, 6.0], [0.25, 0.5, 0.75]]


def test_ascii_with_unknown_properties(tmp_path):
    p = write(tmp_path / "a.ply", b"ply\nformat ascii 1.0\nelement vertex 2\n"
              b"property uchar red\nproperty double z\nproperty double x\nproperty double y\n"
              b"end_header\n10 3 1 2\n20 6 4 5\n")
    assert read_ply(p).points.tolist() == [[1, 2, 3], [4, 5, 6]]


def test_big_endian_rejected(tmp_path):
    p = write(tmp_path / "be.ply", b"ply\nformat binary_big_endian 1.0\nelement vertex 1\n"
              b"property float x\nproperty float y\nproperty float z\nend_header\n" + bytes(12))
    with pytest.raises(UnsupportedEncoding):
        read_ply(p)


@pytest.mark.parametrize("body", [b"1 2 3\n", b"1 2 3\n4 5 6\n7 8 9\n"])
def test_ascii_count_mismatch(tmp_path, body):
    p = write(tmp_path / "m.ply", b"ply\nformat ascii 1.0\nelement vertex 2\n"
              b"property float x\nproperty float y\nproperty float z\nend_header\n" + body)
    with pytest.raises(CountMismatch):
        read_ply(p)


def test_binary_count_mismatch(tmp_path):
    head = (b"ply\nformat binary_little_endian 1.0\nelement vertex 2\n"
            b"property float x\nproperty float y\nproperty float z\nend_header\n")
    with pytest.raises(CountMismatch):
        read_ply(write(tmp_path / "s.ply", head + bytes(12)))
    with pytest.raises(CountMismatch):
        read_ply(write(tmp_path / "l.ply", head + bytes(25)))


@pytest.mark.parametrize("data", [
    b"plx\n",
    b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n",
    b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n1 2\n",
    b"ply\nformat ascii 1.0\nelement vertex one\nend_header\n",
    b"ply\nformat ascii 1.0\nelement vertex 1\nproperty quad x\nend_header\n",
])
def test_malformed_headers(tmp_path, data):
    with pytest.raises(MalformedHeader):
        read_ply(write(tmp_path / "bad.ply", data))


def test_kitti_single_record(tmp_path):
    p = write(tmp_path / "one.bin", struct.pack("<4f", 1.5, -2.0, 3.25, 0.9))
    cloud = read_kitti_bin(p)
    assert cloud.points.tolist() == [[1.5, -2.0, 3.25]]
    assert cloud.source_format == "kitti-bin"


def test_kitti_empty(tmp_path):
    assert len(read_kitti_bin(write(tmp_path / "e.bin", b""))) == 0


def test_kitti_random_matches_scalar_parser(tmp_path, rng):
    data = rng.normal(0, 30, size=40).astype("<f4").tobytes()
    assert len(data) == 160
    cloud = read_cloud(write(tmp_path / "r.bin", data))
    expected = [list(struct.unpack_from("<3f", data, 16 * i)) for i in range(10)]
    assert cloud.points.tolist() == expected


def test_kitti_bad_length(tmp_path):
    with pytest.raises(MalformedFile):
        read_kitti_bin(write(tmp_path / "b.bin", bytes(20)))


def test_unknown_extension_and_nonfinite(tmp_path):
    with pytest.raises(UnsupportedEncoding):
        read_cloud(write(tmp_path / "x.xyz", b""))
    with pytest.raises(MalformedFile):
        RawCloud([[np.nan, 0, 0]])
